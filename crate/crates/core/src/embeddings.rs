//! Per-entity Dirichlet embeddings.
//!
//! Each entity gets a concentration vector `gamma_u` over `K` consumption
//! archetypes. The archetypes are k-means centroids of the entities' mean
//! daily profiles; `gamma_u` is a softmax responsibility over centroids,
//! scaled by how much data backs the entity:
//!
//! `gamma_u = alpha0 * softmax(-d^2(mean_u, c_k) / tau) * min(N_u, N_cap) / N_cap + eps`
//!
//! `tau` is the median squared pairwise distance between mean profiles.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingParams {
    /// Number of archetypes `K`; zero disables entity context.
    pub size: usize,
    pub alpha0: f64,
    pub n_cap: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        EmbeddingParams {
            size: 100,
            alpha0: 10.0,
            n_cap: 365,
            epsilon: 0.01,
            seed: 0,
            kmeans_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityEmbedding {
    pub entity_id: String,
    pub gamma: Vec<f64>,
}

impl EntityEmbedding {
    /// Mean of Dir(gamma).
    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.gamma.iter().sum();
        self.gamma.iter().map(|g| g / total).collect()
    }

    /// One draw from Dir(gamma) through normalized Gamma variates.
    pub fn sample_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        sample_dirichlet(&self.gamma, rng)
    }
}

/// Fitting metadata persisted next to the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub size: usize,
    pub seed: u64,
    pub tau: f64,
    pub alpha0: f64,
    pub n_cap: usize,
    pub epsilon: f64,
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub meta: EmbeddingMeta,
    entries: Vec<EntityEmbedding>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Draw from Dir(alpha). Small concentrations go through log-space Gamma
/// draws (`ln G(a+1) + ln(U)/a`) so the result never collapses to 0/0.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    match alpha.len() {
        0 => return Vec::new(),
        1 => return vec![1.0],
        _ => {}
    }
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a < 1.0 {
                let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
                let u: f64 = rng.random::<f64>();
                g.ln() + u.max(f64::MIN_POSITIVE).ln() / a
            } else {
                Gamma::new(a, 1.0).expect("positive shape").sample(rng).ln()
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut theta: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|t| *t /= total);
    theta
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Seeded k-means (k-means++ initialisation, Lloyd iterations).
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[domain::KMEANS]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let best = nearest(p, &centroids);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(points) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // empty cluster: move it onto the point worst served by the others
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                centroids[c] = points[far].clone();
            }
        }
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Fit the embedding table. `entities` pairs each entity id with its daily
/// profiles (training portion only). Mean profiles are divided by their
/// average level before clustering, so entities group by shape, not size.
pub fn fit_embeddings(entities: &[(String, Vec<Vec<f64>>)], params: &EmbeddingParams) -> Result<EmbeddingTable> {
    let k = params.size;
    if k == 0 {
        return EmbeddingTable::from_entries(
            EmbeddingMeta {
                size: 0,
                seed: params.seed,
                tau: 1.0,
                alpha0: params.alpha0,
                n_cap: params.n_cap,
                epsilon: params.epsilon,
                centroids: Vec::new(),
            },
            entities
                .iter()
                .map(|(id, _)| EntityEmbedding {
                    entity_id: id.clone(),
                    gamma: Vec::new(),
                })
                .collect(),
        );
    }
    if entities.is_empty() {
        return Err(Error::data("no entities to embed"));
    }
    if k > entities.len() {
        return Err(Error::config(format!(
            "embedding size {k} exceeds the number of entities ({})",
            entities.len()
        )));
    }
    if !(params.alpha0 > 0.0) || !(params.epsilon > 0.0) || params.n_cap == 0 {
        return Err(Error::config("alpha0, epsilon and n_cap must be positive"));
    }
    let mut means = Vec::with_capacity(entities.len());
    for (id, days) in entities {
        let first = days
            .first()
            .ok_or_else(|| Error::data(format!("entity `{id}` has no profiles")))?;
        let mut mean = vec![0.0; first.len()];
        for d in days {
            if d.len() != mean.len() {
                return Err(Error::data(format!("entity `{id}` has ragged profiles")));
            }
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= days.len() as f64);
        // cluster on shape: divide out the entity's average level
        let level = mean.iter().sum::<f64>() / mean.len() as f64;
        if level > 0.0 {
            mean.iter_mut().for_each(|m| *m /= level);
        }
        means.push(mean);
    }

    let centroids = kmeans(&means, k, params.kmeans_iters, params.seed);
    let mut pairwise = Vec::with_capacity(means.len() * (means.len() - 1) / 2);
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            pairwise.push(sq_dist(&means[i], &means[j]));
        }
    }
    let tau = match median(pairwise) {
        Some(t) if t > 0.0 => t,
        _ => 1.0,
    };

    let entries = entities
        .iter()
        .zip(&means)
        .map(|((id, days), mean)| {
            let logits: Vec<f64> = centroids.iter().map(|c| -sq_dist(mean, c) / tau).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = w.iter().sum();
            let evidence = days.len().min(params.n_cap) as f64 / params.n_cap as f64;
            EntityEmbedding {
                entity_id: id.clone(),
                gamma: w
                    .iter()
                    .map(|r| params.alpha0 * (r / total) * evidence + params.epsilon)
                    .collect(),
            }
        })
        .collect();

    EmbeddingTable::from_entries(
        EmbeddingMeta {
            size: k,
            seed: params.seed,
            tau,
            alpha0: params.alpha0,
            n_cap: params.n_cap,
            epsilon: params.epsilon,
            centroids,
        },
        entries,
    )
}

impl EmbeddingTable {
    pub fn from_entries(meta: EmbeddingMeta, entries: Vec<EntityEmbedding>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.gamma.len() != meta.size {
                return Err(Error::data(format!(
                    "entity `{}` has {} concentrations, expected {}",
                    e.entity_id,
                    e.gamma.len(),
                    meta.size
                )));
            }
            if e.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                return Err(Error::data(format!(
                    "entity `{}` has a non-positive concentration",
                    e.entity_id
                )));
            }
            if index.insert(e.entity_id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate entity `{}`", e.entity_id)));
            }
        }
        Ok(EmbeddingTable { meta, entries, index })
    }

    pub fn size(&self) -> usize {
        self.meta.size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EntityEmbedding] {
        &self.entries
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityEmbedding> {
        self.index.get(entity_id).map(|&i| &self.entries[i])
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.entity_id.clone(), i))
            .collect();
    }

    /// Per-entity draw used when a table-wide seed is enough.
    pub fn sample_for(&self, entity_id: &str, seed: u64, counter: u64) -> Result<Vec<f64>> {
        let e = self
            .get(entity_id)
            .ok_or_else(|| Error::UnknownEntity(entity_id.to_string()))?;
        let mut r = rng::stream(seed, &[domain::THETA, counter]);
        Ok(e.sample_theta(&mut r))
    }

    /// Writes `<stem>.csv` (entity_id, gamma_1..gamma_K) and `<stem>.json`
    /// (metadata).
    pub fn save(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header = vec!["entity_id".to_string()];
        header.extend((1..=self.meta.size).map(|k| format!("gamma_{k}")));
        w.write_record(&header)?;
        for e in &self.entries {
            let mut rec = vec![e.entity_id.clone()];
            rec.extend(e.gamma.iter().map(|g| g.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        std::fs::write(meta_path, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta: EmbeddingMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let id = rec.get(0).ok_or_else(|| Error::data("empty embedding row"))?.to_string();
            let gamma = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| Error::data(format!("bad concentration `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            entries.push(EntityEmbedding { entity_id: id, gamma });
        }
        Self::from_entries(meta, entries)
    }

    /// Restore the lookup index after deserializing with serde.
    pub fn reindexed(mut self) -> Self {
        self.rebuild_index();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: usize) -> EmbeddingParams {
        EmbeddingParams {
            size: k,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn single_entity_single_cluster() {
        let data = vec![("a".to_string(), vec![vec![1.0, 2.0]; 40])];
        let t = fit_embeddings(&data, &params(1)).unwrap();
        let g = &t.get("a").unwrap().gamma;
        assert_eq!(g.len(), 1);
        let expected = 10.0 * 40.0 / 365.0 + 0.01;
        assert!((g[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn evidence_saturates_at_cap() {
        let data = vec![("a".to_string(), vec![vec![1.0]; 500])];
        let t = fit_embeddings(&data, &params(1)).unwrap();
        assert!((t.get("a").unwrap().gamma[0] - 10.01).abs() < 1e-12);
    }

    #[test]
    fn identical_profiles_identical_gamma() {
        let data = vec![
            ("a".to_string(), vec![vec![1.0, 0.0, 3.0]; 10]),
            ("b".to_string(), vec![vec![1.0, 0.0, 3.0]; 10]),
            ("c".to_string(), vec![vec![4.0, 4.0, 0.0]; 10]),
        ];
        let t = fit_embeddings(&data, &params(2)).unwrap();
        assert_eq!(t.get("a").unwrap().gamma, t.get("b").unwrap().gamma);
    }

    #[test]
    fn too_many_clusters_is_config_error() {
        let data = vec![("a".to_string(), vec![vec![1.0]; 3])];
        assert!(matches!(fit_embeddings(&data, &params(2)), Err(Error::Config(_))));
    }

    #[test]
    fn empty_entity_is_data_error() {
        let data = vec![("a".to_string(), vec![vec![1.0]]), ("b".to_string(), vec![])];
        assert!(matches!(fit_embeddings(&data, &params(1)), Err(Error::Data(_))));
    }

    #[test]
    fn zero_size_table_has_empty_context() {
        let data = vec![("a".to_string(), vec![vec![1.0]])];
        let t = fit_embeddings(&data, &params(0)).unwrap();
        assert!(t.get("a").unwrap().gamma.is_empty());
        assert!(t.get("a").unwrap().sample_theta(&mut rng::stream(0, &[])).is_empty());
    }

    #[test]
    fn one_component_dirichlet_is_one() {
        let e = EntityEmbedding {
            entity_id: "a".into(),
            gamma: vec![0.3],
        };
        let mut r = rng::stream(1, &[]);
        for _ in 0..10 {
            assert_eq!(e.sample_theta(&mut r), vec![1.0]);
        }
    }

    #[test]
    fn tiny_concentrations_stay_on_simplex() {
        let mut r = rng::stream(2, &[]);
        for _ in 0..1000 {
            let t = sample_dirichlet(&[1e-3, 2e-3, 5e-4], &mut r);
            assert!(t.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let data = vec![
            ("a".to_string(), vec![vec![1.0, 0.0]; 10]),
            ("b".to_string(), vec![vec![0.0, 1.0]; 12]),
            ("c".to_string(), vec![vec![0.5, 0.5]; 7]),
        ];
        let t = fit_embeddings(&data, &params(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, m) = (dir.path().join("e.csv"), dir.path().join("e.json"));
        t.save(&c, &m).unwrap();
        assert_eq!(EmbeddingTable::load(&c, &m).unwrap(), t);
    }
}
