//! Benchmark scores: quantile (pinball) loss, interval score, interval
//! coverage score and the average test log-likelihood.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionedData, Conditioner, ThetaDraw};
use crate::cvae::CvaeModel;
use crate::data::{Example, NormalizationManifest};
use crate::error::{Error, Result};
use crate::forecast::{forecast_day, Provenance, QuantileFan};
use crate::qrnn::{pinball_loss, QrnnModel};
use crate::rng::{self, domain};

/// A symmetric pair of levels: indices into the level list and the nominal
/// coverage `q_upper - q_lower`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelPair {
    pub lower: usize,
    pub upper: usize,
    pub nominal: f64,
}

const SYMMETRY_TOL: f64 = 1e-9;

/// Pair `q_i` with `q_{Q-i+1}`, skipping a median at 0.5.
pub fn level_pairs(levels: &[f64]) -> Result<Vec<LevelPair>> {
    let idx: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] != 0.5).collect();
    if idx.is_empty() || idx.len() % 2 != 0 {
        return Err(Error::config("interval scores need symmetric pairs of quantile levels"));
    }
    let half = idx.len() / 2;
    let mut pairs = Vec::with_capacity(half);
    for k in 0..half {
        let (lo, hi) = (idx[k], idx[idx.len() - 1 - k]);
        if (levels[lo] + levels[hi] - 1.0).abs() > SYMMETRY_TOL || levels[lo] >= 0.5 {
            return Err(Error::config(format!(
                "levels {} and {} are not symmetric around 0.5",
                levels[lo], levels[hi]
            )));
        }
        pairs.push(LevelPair {
            lower: lo,
            upper: hi,
            nominal: levels[hi] - levels[lo],
        });
    }
    Ok(pairs)
}

fn check_inputs(fans: &[QuantileFan], truths: &[Vec<f64>]) -> Result<()> {
    if fans.is_empty() || fans.len() != truths.len() {
        return Err(Error::argument("need one fan per truth and at least one of each"));
    }
    let levels = &fans[0].levels;
    for (f, x) in fans.iter().zip(truths) {
        if &f.levels != levels || f.values.len() != levels.len() || f.values.iter().any(|r| r.len() != x.len()) {
            return Err(Error::argument("fans must share levels and match truth lengths"));
        }
    }
    Ok(())
}

/// Mean pinball loss over examples, levels and time steps.
pub fn quantile_loss(fans: &[QuantileFan], truths: &[Vec<f64>]) -> Result<f64> {
    check_inputs(fans, truths)?;
    let total: f64 = fans
        .iter()
        .zip(truths)
        .map(|(f, x)| pinball_loss(&f.levels, &f.values, x))
        .sum();
    Ok(total / fans.len() as f64)
}

/// Average over examples, time steps and pairs of
/// `(u - l) + (2 / I) * (max(0, l - x) + max(0, x - u))`.
pub fn interval_score(fans: &[QuantileFan], truths: &[Vec<f64>]) -> Result<f64> {
    check_inputs(fans, truths)?;
    let pairs = level_pairs(&fans[0].levels)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (f, x) in fans.iter().zip(truths) {
        for p in &pairs {
            let (lo, hi) = (&f.values[p.lower], &f.values[p.upper]);
            for t in 0..x.len() {
                let penalty = (lo[t] - x[t]).max(0.0) + (x[t] - hi[t]).max(0.0);
                total += hi[t] - lo[t] + 2.0 / p.nominal * penalty;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub lower_level: f64,
    pub upper_level: f64,
    pub nominal: f64,
    pub empirical: f64,
}

/// `(2/Q) * sum_i |coverage_i - I_i|` over symmetric pairs, where coverage
/// counts truths inside the closed interval.
pub fn inter_cover_score(fans: &[QuantileFan], truths: &[Vec<f64>]) -> Result<(f64, Vec<CoverageRow>)> {
    check_inputs(fans, truths)?;
    let levels = &fans[0].levels;
    let pairs = level_pairs(levels)?;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut score = 0.0;
    for p in &pairs {
        let mut inside = 0usize;
        let mut count = 0usize;
        for (f, x) in fans.iter().zip(truths) {
            for (t, v) in x.iter().enumerate() {
                if f.values[p.lower][t] <= *v && *v <= f.values[p.upper][t] {
                    inside += 1;
                }
                count += 1;
            }
        }
        let empirical = inside as f64 / count as f64;
        score += (empirical - p.nominal).abs();
        rows.push(CoverageRow {
            lower_level: levels[p.lower],
            upper_level: levels[p.upper],
            nominal: p.nominal,
            empirical,
        });
    }
    Ok((score / pairs.len() as f64, rows))
}

/// Mean importance-sampled `log p(x | c)` over `data`, with entity context at
/// its Dirichlet mean.
pub fn average_log_likelihood<D: ConditionedData>(model: &CvaeModel, data: &D, is_samples: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let values: Vec<Result<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[domain::IMPORTANCE, i as u64]);
            let c = data.condition(i, ThetaDraw::Mean);
            model.importance_log_likelihood(data.target(i), &c, is_samples, &mut r)
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub quantile_loss: f64,
    pub interval: f64,
    pub inter_cover: f64,
}

pub fn score_fans(fans: &[QuantileFan], truths: &[Vec<f64>]) -> Result<(Scores, Vec<CoverageRow>)> {
    let (inter_cover, coverage) = inter_cover_score(fans, truths)?;
    Ok((
        Scores {
            quantile_loss: quantile_loss(fans, truths)?,
            interval: interval_score(fans, truths)?,
            inter_cover,
        },
        coverage,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub embed_size: usize,
    pub dict_size: Option<usize>,
    pub quantile_loss: f64,
    pub interval: f64,
    pub inter_cover: f64,
    /// Absent for models without a likelihood.
    pub all: Option<f64>,
    pub entities: usize,
    pub examples: usize,
    pub profile_len: usize,
    pub levels: Vec<f64>,
    pub coverage: Vec<CoverageRow>,
    /// The same scores with fans and truths mapped back to original units.
    pub physical: Option<Scores>,
    pub samples: Option<usize>,
    pub is_samples: Option<usize>,
}

impl EvalReport {
    /// Assemble a report from fans and truths in normalized units.
    pub fn from_fans(
        model: &str,
        embed_size: usize,
        dict_size: Option<usize>,
        fans: &[QuantileFan],
        examples: &[Example],
        manifest: Option<&NormalizationManifest>,
    ) -> Result<Self> {
        let truths: Vec<Vec<f64>> = examples.iter().map(|e| e.target.clone()).collect();
        let (scores, coverage) = score_fans(fans, &truths)?;
        let physical = match manifest {
            Some(m) => {
                let pf: Vec<QuantileFan> = fans.iter().map(|f| f.map_values(|t, v| m.denormalize_at(t, v))).collect();
                let pt: Vec<Vec<f64>> = truths.iter().map(|x| m.denormalize(x)).collect();
                Some(score_fans(&pf, &pt)?.0)
            }
            None => None,
        };
        let mut ids: Vec<&str> = examples.iter().map(|e| e.entity_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(EvalReport {
            model: model.to_string(),
            embed_size,
            dict_size,
            quantile_loss: scores.quantile_loss,
            interval: scores.interval,
            inter_cover: scores.inter_cover,
            all: None,
            entities: ids.len(),
            examples: examples.len(),
            profile_len: truths[0].len(),
            levels: fans[0].levels.clone(),
            coverage,
            physical,
            samples: None,
            is_samples: None,
        })
    }

    pub fn to_markdown(&self) -> String {
        markdown_table(std::slice::from_ref(self))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "−".to_string(), |x| format!("{x:.4}"))
}

/// Rows of reports laid out as model / K / V / scores.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    s.push_str("| Model | K | V | QuantileLoss | Interval | InterCover | ALL |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |",
            r.model,
            r.embed_size,
            r.dict_size.map_or_else(|| "−".to_string(), |v| v.to_string()),
            r.quantile_loss,
            r.interval,
            r.inter_cover,
            fmt_opt(r.all)
        );
    }
    s
}

/// Settings for evaluating the VAE on a set of examples.
#[derive(Clone, Debug)]
pub struct CvaeEvalSettings<'a> {
    pub levels: &'a [f64],
    pub samples: usize,
    pub is_samples: usize,
    pub seed: u64,
    pub manifest: Option<&'a NormalizationManifest>,
}

/// Quantile fans for each example from `samples`-component mixtures.
pub fn cvae_fans(model: &CvaeModel, conditioner: &Conditioner, examples: &[Example], levels: &[f64], samples: usize, seed: u64) -> Result<Vec<QuantileFan>> {
    examples
        .par_iter()
        .map(|ex| {
            let c = conditioner.condition_for(ex, ThetaDraw::Mean);
            let prov = Provenance {
                entity_id: ex.entity_id.clone(),
                entity: ex.entity,
                day: ex.day,
                date: ex.date.to_string(),
                seed,
            };
            Ok(forecast_day(model, &c, samples, levels, prov)?.fan)
        })
        .collect()
}

pub fn evaluate_cvae(model: &CvaeModel, conditioner: &Conditioner, examples: &[Example], s: &CvaeEvalSettings<'_>) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let fans = cvae_fans(model, conditioner, examples, s.levels, s.samples, s.seed)?;
    let dict = model.basis().learnable_len() / model.target_dim().max(1);
    let dict = if model.basis().is_learned() { dict } else { 0 };
    let mut report = EvalReport::from_fans("GUIDE-VAE", conditioner.embed_size(), Some(dict), &fans, examples, s.manifest)?;
    let set = crate::condition::ConditionedSet { examples, conditioner };
    report.all = Some(average_log_likelihood(model, &set, s.is_samples, s.seed)?);
    report.samples = Some(s.samples);
    report.is_samples = Some(s.is_samples);
    Ok(report)
}

pub fn qrnn_fans(model: &QrnnModel, conditioner: &Conditioner, examples: &[Example]) -> Result<Vec<QuantileFan>> {
    examples
        .par_iter()
        .map(|ex| model.predict(&conditioner.condition_for(ex, ThetaDraw::Mean)))
        .collect()
}

pub fn evaluate_qrnn(model: &QrnnModel, conditioner: &Conditioner, examples: &[Example], manifest: Option<&NormalizationManifest>) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let fans = qrnn_fans(model, conditioner, examples)?;
    EvalReport::from_fans("QRNN", conditioner.embed_size(), None, &fans, examples, manifest)
}
