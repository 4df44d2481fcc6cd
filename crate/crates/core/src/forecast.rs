//! Day-ahead forecast distributions built from a trained VAE.
//!
//! A forecast is an equal-weight mixture of `S` Gaussians, one per prior
//! draw `z_s`. From it we derive ensembles (two-level sampling), marginal
//! quantile fans, the closest ensemble member to an observed day, the
//! best-fitting component, standard-deviation fans and covariance bands.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cvae::{log_sum_exp, CvaeModel};
use crate::error::{Error, Result};
use crate::lowrank::{CovarianceBand, LowRankGaussian, PatternBasis};
use crate::rng::{self, domain};

pub const DEFAULT_SAMPLES: usize = 500;
pub const DEFAULT_ALPHAS: [f64; 5] = [0.25, 0.5, 1.0, 1.5, 2.0];
pub const DEFAULT_BAND_HALF_WIDTH: usize = 6;
pub const DEFAULT_LEVELS: [f64; 11] = [0.05, 0.15, 0.25, 0.35, 0.45, 0.5, 0.55, 0.65, 0.75, 0.85, 0.95];

/// Where a forecast came from; also the address of its random streams.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub entity_id: String,
    /// Entity position in its dataset; part of the stream address.
    pub entity: usize,
    /// Day index within the entity's series; part of the stream address.
    pub day: usize,
    pub date: String,
    pub seed: u64,
}

impl Provenance {
    fn address(&self, dom: u64, s: usize) -> [u64; 4] {
        [dom, self.entity as u64, self.day as u64, s as u64]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastMixture {
    components: Vec<LowRankGaussian>,
    provenance: Provenance,
}

/// Serialized form of a mixture: the shared basis once, then per-component
/// means and auxiliary deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub provenance: Provenance,
    pub jitter: f64,
    pub basis: PatternBasis,
    pub means: Vec<Vec<f64>>,
    pub aux_stds: Vec<Vec<f64>>,
}

impl ForecastMixture {
    pub fn from_components(components: Vec<LowRankGaussian>, provenance: Provenance) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::argument("a mixture needs at least one component"))?;
        for c in &components[1..] {
            if c.dim() != first.dim() || c.jitter() != first.jitter() || c.basis() != first.basis() {
                return Err(Error::argument("mixture components must share dimension, basis and jitter"));
            }
        }
        Ok(ForecastMixture {
            components,
            provenance,
        })
    }

    pub fn components(&self) -> &[LowRankGaussian] {
        &self.components
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component_log_densities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.log_density(x)).collect()
    }

    /// `log( (1/S) sum_s N(x; mu_s, Sigma_s) )`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let lp = self.component_log_densities(x)?;
        Ok(log_sum_exp(&lp) - (lp.len() as f64).ln())
    }

    /// `(1/S) sum_s mu_s`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(c.mu()) {
                *a += b;
            }
        }
        let s = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= s);
        m
    }

    /// `S_e` rows, each from a uniformly chosen component.
    pub fn sample_ensemble<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Ensemble> {
        if size == 0 {
            return Err(Error::argument("ensemble size must be positive"));
        }
        let samples = (0..size)
            .map(|_| {
                let k = rng.random_range(0..self.len());
                self.components[k].sample(rng)
            })
            .collect();
        Ok(Ensemble {
            samples,
            provenance: self.provenance.clone(),
        })
    }

    /// One row per component, row `s` drawn from component `s` on its own
    /// counter stream.
    pub fn sample_per_component(&self) -> Ensemble {
        let samples = self
            .components
            .iter()
            .enumerate()
            .map(|(s, c)| {
                let mut r = rng::stream(self.provenance.seed, &self.provenance.address(domain::ENSEMBLE, s));
                c.sample(&mut r)
            })
            .collect();
        Ensemble {
            samples,
            provenance: self.provenance.clone(),
        }
    }

    /// Component with the highest density at `truth` (first on ties).
    pub fn best_component(&self, truth: &[f64]) -> Result<(usize, &LowRankGaussian)> {
        let lp = self.component_log_densities(truth)?;
        let mut best = 0;
        for (i, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = i;
            }
        }
        Ok((best, &self.components[best]))
    }

    pub fn to_record(&self) -> MixtureRecord {
        MixtureRecord {
            provenance: self.provenance.clone(),
            jitter: self.components[0].jitter(),
            basis: (**self.components[0].basis()).clone(),
            means: self.components.iter().map(|c| c.mu().to_vec()).collect(),
            aux_stds: self.components.iter().map(|c| c.aux_std().to_vec()).collect(),
        }
    }

    pub fn from_record(rec: MixtureRecord) -> Result<Self> {
        if rec.means.len() != rec.aux_stds.len() {
            return Err(Error::data("mixture record has mismatched component lists"));
        }
        let basis = Arc::new(rec.basis);
        let components = rec
            .means
            .into_iter()
            .zip(rec.aux_stds)
            .map(|(m, s)| LowRankGaussian::new(m, basis.clone(), s, rec.jitter))
            .collect::<Result<Vec<_>>>()?;
        Self::from_components(components, rec.provenance)
    }
}

/// Sample `S` latents from the prior and decode each into a component.
/// Only the conditioning vector is read; the day's observation is not an
/// input.
pub fn build_mixture(model: &CvaeModel, condition: &[f64], samples: usize, provenance: Provenance) -> Result<ForecastMixture> {
    if samples == 0 {
        return Err(Error::argument("a mixture needs at least one component"));
    }
    let components = (0..samples)
        .map(|s| {
            let mut r = rng::stream(provenance.seed, &provenance.address(domain::PRIOR, s));
            let z: Vec<f64> = (0..model.latent_dim()).map(|_| r.sample(StandardNormal)).collect();
            model.decode(&z, condition)
        })
        .collect::<Result<Vec<_>>>()?;
    ForecastMixture::from_components(components, provenance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub samples: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Quantile values per level (rows) and time step (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileFan {
    pub levels: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl QuantileFan {
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_monotone(&self) -> bool {
        self.values
            .windows(2)
            .all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| a <= b))
    }

    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> QuantileFan {
        QuantileFan {
            levels: self.levels.clone(),
            values: self
                .values
                .iter()
                .map(|row| row.iter().enumerate().map(|(t, v)| f(t, *v)).collect())
                .collect(),
        }
    }
}

pub fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::argument("no quantile levels"));
    }
    if levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::argument("quantile levels must lie in (0, 1)"));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::argument("quantile levels must be strictly increasing"));
    }
    Ok(())
}

/// Index (1-based) of the order statistic `inf{x : q <= F_S(x)}` picks for
/// `S` samples, with `F_S(x) = k / S` evaluated in floating point.
pub fn order_statistic_rank(q: f64, samples: usize) -> usize {
    let s = samples as f64;
    let mut k = ((q * s).ceil() as usize).clamp(1, samples);
    while k > 1 && q <= (k - 1) as f64 / s {
        k -= 1;
    }
    while k < samples && q > k as f64 / s {
        k += 1;
    }
    k
}

/// Per-column empirical quantiles of an ensemble.
pub fn empirical_quantiles(samples: &[Vec<f64>], levels: &[f64]) -> Result<QuantileFan> {
    check_levels(levels)?;
    let first = samples.first().ok_or_else(|| Error::argument("empty ensemble"))?;
    let dim = first.len();
    let n = samples.len();
    let mut values = vec![vec![0.0; dim]; levels.len()];
    let ranks: Vec<usize> = levels.iter().map(|&q| order_statistic_rank(q, n)).collect();
    let mut column = vec![0.0; n];
    for t in 0..dim {
        for (c, row) in column.iter_mut().zip(samples) {
            *c = row[t];
        }
        column.sort_by(f64::total_cmp);
        for (i, &k) in ranks.iter().enumerate() {
            values[i][t] = column[k - 1];
        }
    }
    Ok(QuantileFan {
        levels: levels.to_vec(),
        values,
    })
}

/// Ensemble row closest to `truth` in Euclidean distance (first on ties).
pub fn best_trace<'a>(samples: &'a [Vec<f64>], truth: &[f64]) -> Result<(usize, &'a [f64])> {
    if samples.is_empty() {
        return Err(Error::argument("empty ensemble"));
    }
    let dist = |row: &[f64]| -> f64 { row.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut best = 0;
    let mut best_d = dist(&samples[0]);
    for (i, row) in samples.iter().enumerate().skip(1) {
        let d = dist(row);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok((best, &samples[best]))
}

/// Rows `mu + alpha * sqrt(diag(Sigma))`, one per `alpha`.
pub fn sigma_fan(component: &LowRankGaussian, alphas: &[f64]) -> Vec<Vec<f64>> {
    let sd: Vec<f64> = component.variances().iter().map(|v| v.sqrt()).collect();
    alphas
        .iter()
        .map(|a| component.mu().iter().zip(&sd).map(|(m, s)| m + a * s).collect())
        .collect()
}

/// Everything produced for one (entity, day).
#[derive(Clone, Debug)]
pub struct DayForecast {
    pub mixture: ForecastMixture,
    pub ensemble: Ensemble,
    pub fan: QuantileFan,
}

/// Mixture, per-component ensemble and quantile fan for one day.
pub fn forecast_day(model: &CvaeModel, condition: &[f64], samples: usize, levels: &[f64], provenance: Provenance) -> Result<DayForecast> {
    let mixture = build_mixture(model, condition, samples, provenance)?;
    let ensemble = mixture.sample_per_component();
    let fan = empirical_quantiles(&ensemble.samples, levels)?;
    Ok(DayForecast {
        mixture,
        ensemble,
        fan,
    })
}

fn header(first: &[&str], dim: usize) -> String {
    let mut h: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    h.extend((0..dim).map(|t| format!("t{t}")));
    h.join(",")
}

fn row(prefix: &[String], values: impl Iterator<Item = String>) -> String {
    let mut cells = prefix.to_vec();
    cells.extend(values);
    cells.join(",")
}

pub fn ensemble_csv_header(dim: usize) -> String {
    header(&["entity", "day", "sample"], dim)
}

pub fn write_ensemble_rows<W: Write>(w: &mut W, ensemble: &Ensemble) -> Result<()> {
    let p = &ensemble.provenance;
    for (s, r) in ensemble.samples.iter().enumerate() {
        writeln!(w, "{}", row(&[p.entity_id.clone(), p.date.clone(), s.to_string()], r.iter().map(|v| v.to_string())))?;
    }
    Ok(())
}

pub fn fan_csv_header(dim: usize) -> String {
    header(&["entity", "day", "level"], dim)
}

pub fn write_fan_rows<W: Write>(w: &mut W, entity_id: &str, date: &str, fan: &QuantileFan) -> Result<()> {
    for (q, r) in fan.levels.iter().zip(&fan.values) {
        writeln!(w, "{}", row(&[entity_id.to_string(), date.to_string(), q.to_string()], r.iter().map(|v| v.to_string())))?;
    }
    Ok(())
}

pub fn band_csv_header(dim: usize) -> String {
    header(&["entity", "day", "band_row"], dim)
}

/// Absent band entries are written as empty cells.
pub fn write_band_rows<W: Write>(w: &mut W, entity_id: &str, date: &str, band: &CovarianceBand) -> Result<()> {
    for i in 0..band.rows() {
        writeln!(
            w,
            "{}",
            row(
                &[entity_id.to_string(), date.to_string(), i.to_string()],
                band.row(i).iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default())
            )
        )?;
    }
    Ok(())
}

/// Fans keyed by (entity, day) as read back from a fan CSV.
pub type FanTable = BTreeMap<(String, String), QuantileFan>;

pub fn read_fan_csv(path: &Path) -> Result<FanTable> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: FanTable = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> { s.parse().map_err(|e| Error::data(format!("bad number `{s}` in fan file: {e}"))) };
        let key = (rec[0].to_string(), rec[1].to_string());
        let level = parse(&rec[2])?;
        let values = rec.iter().skip(3).map(parse).collect::<Result<Vec<_>>>()?;
        let fan = out.entry(key).or_insert_with(|| QuantileFan {
            levels: Vec::new(),
            values: Vec::new(),
        });
        fan.levels.push(level);
        fan.values.push(values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn prov() -> Provenance {
        Provenance {
            entity_id: "u0".into(),
            entity: 0,
            day: 0,
            date: "2021-01-01".into(),
            seed: 1,
        }
    }

    fn scalar(mu: f64, sd: f64) -> LowRankGaussian {
        let basis = Arc::new(PatternBasis::Dictionary(DMatrix::from_element(1, 1, 1.0)));
        LowRankGaussian::new(vec![mu], basis, vec![sd], 1e-12).unwrap()
    }

    #[test]
    fn single_component_mixture_is_that_component() {
        let c = scalar(0.3, 1.2);
        let m = ForecastMixture::from_components(vec![c.clone()], prov()).unwrap();
        assert_eq!(m.log_density(&[0.9]).unwrap(), c.log_density(&[0.9]).unwrap());
    }

    #[test]
    fn two_identical_components() {
        let c = scalar(0.3, 1.2);
        let m = ForecastMixture::from_components(vec![c.clone(), c.clone()], prov()).unwrap();
        assert!((m.log_density(&[0.9]).unwrap() - c.log_density(&[0.9]).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair_at_midpoint() {
        // N(0,1) and N(2,1) at x = 1: both densities are phi(1)
        let m = ForecastMixture::from_components(vec![scalar(0.0, 1.0), scalar(2.0, 1.0)], prov()).unwrap();
        let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((m.log_density(&[1.0]).unwrap() - phi1.ln()).abs() < 1e-10);
    }

    #[test]
    fn quantiles_of_four_samples() {
        let s: Vec<Vec<f64>> = [3.0, 1.0, 4.0, 2.0].iter().map(|v| vec![*v]).collect();
        let f = empirical_quantiles(&s, &[0.5, 0.75, 0.76]).unwrap();
        assert_eq!(f.values, vec![vec![2.0], vec![3.0], vec![4.0]]);
    }

    #[test]
    fn constant_ensemble_constant_quantiles() {
        let s = vec![vec![1.5, -2.0]; 9];
        let f = empirical_quantiles(&s, &DEFAULT_LEVELS).unwrap();
        assert!(f.values.iter().all(|r| r == &vec![1.5, -2.0]));
    }

    #[test]
    fn empty_ensemble_rejected() {
        assert!(matches!(empirical_quantiles(&[], &[0.5]), Err(Error::Argument(_))));
        assert!(matches!(best_trace(&[], &[0.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn rank_respects_float_boundaries() {
        // 0.15 * 100 rounds up past 15 in floating point, but 15/100 == 0.15
        assert_eq!(order_statistic_rank(0.15, 100), 15);
        assert_eq!(order_statistic_rank(0.75, 4), 3);
        assert_eq!(order_statistic_rank(0.76, 4), 4);
        assert_eq!(order_statistic_rank(1e-9, 4), 1);
    }

    #[test]
    fn best_trace_picks_nearest() {
        let s = vec![vec![-1.0], vec![0.5], vec![3.0]];
        assert_eq!(best_trace(&s, &[0.0]).unwrap(), (1, &[0.5][..]));
        let with_truth = vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 2.0]];
        assert_eq!(best_trace(&with_truth, &[1.0, 2.0]).unwrap().0, 0);
    }

    #[test]
    fn best_component_nearer_mode() {
        let m = ForecastMixture::from_components(vec![scalar(0.0, 1.0), scalar(5.0, 1.0)], prov()).unwrap();
        assert_eq!(m.best_component(&[0.1]).unwrap().0, 0);
        let one = ForecastMixture::from_components(vec![scalar(9.0, 1.0)], prov()).unwrap();
        assert_eq!(one.best_component(&[0.1]).unwrap().0, 0);
    }

    #[test]
    fn sigma_fan_isotropic_and_zero_alpha() {
        let basis = Arc::new(PatternBasis::Dictionary(DMatrix::zeros(3, 2)));
        let c = LowRankGaussian::new(vec![1.0, 2.0, 3.0], basis, vec![1.0, 1.0], 0.25).unwrap();
        let fan = sigma_fan(&c, &[0.0, 2.0]);
        assert_eq!(fan[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(fan[1], vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn record_round_trip() {
        let m = ForecastMixture::from_components(vec![scalar(0.0, 1.0), scalar(5.0, 2.0)], prov()).unwrap();
        let json = serde_json::to_string(&m.to_record()).unwrap();
        let back = ForecastMixture::from_record(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn degenerate_component_ensemble_is_the_mean() {
        let basis = Arc::new(PatternBasis::Dictionary(DMatrix::from_element(2, 2, 0.7)));
        let c = LowRankGaussian::new_unchecked(vec![4.0, -1.0], basis, vec![0.0, 0.0], 0.0).unwrap();
        let m = ForecastMixture::from_components(vec![c], prov()).unwrap();
        let e = m.sample_ensemble(50, &mut rng::stream(3, &[])).unwrap();
        assert!(e.samples.iter().all(|r| r == &vec![4.0, -1.0]));
    }

    #[test]
    fn fan_csv_round_trip() {
        let fan = QuantileFan {
            levels: vec![0.1, 0.9],
            values: vec![vec![0.25, 1.0 / 3.0], vec![2.0, 7.5]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "{}", fan_csv_header(2)).unwrap();
        write_fan_rows(&mut f, "u1", "2021-02-03", &fan).unwrap();
        drop(f);
        let table = read_fan_csv(&p).unwrap();
        assert_eq!(table[&("u1".to_string(), "2021-02-03".to_string())], fan);
    }
}
