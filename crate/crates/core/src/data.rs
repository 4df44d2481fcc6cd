//! Panel data: ingestion, zero-preserving log normalization, calendar
//! features, chronological splits, example assembly and a synthetic
//! household generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Daily profiles of one entity on consecutive days starting at `start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitySeries {
    pub id: String,
    pub start: NaiveDate,
    pub days: Vec<Vec<f64>>,
}

impl EntitySeries {
    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Duration::days(day as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub profile_len: usize,
    pub entities: Vec<EntitySeries>,
}

impl PanelDataset {
    pub fn new(profile_len: usize, entities: Vec<EntitySeries>) -> Result<Self> {
        for e in &entities {
            if let Some(n) = e.days.iter().position(|d| d.len() != profile_len) {
                return Err(Error::data(format!(
                    "entity `{}` day {n} has {} values, expected {profile_len}",
                    e.id,
                    e.days[n].len()
                )));
            }
        }
        Ok(PanelDataset { profile_len, entities })
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.id == id)
    }

    /// Read `entity_id,date,h00,...,h23`. Rows may come in any order; every
    /// entity's dates must form a gapless run.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "entity_id" || &headers[1] != "date" {
            return Err(Error::data("header must start with `entity_id,date`"));
        }
        let profile_len = headers.len() - 2;
        for (t, h) in headers.iter().skip(2).enumerate() {
            if h != format!("h{t:02}") {
                return Err(Error::data(format!("column {} should be `h{t:02}`, found `{h}`", t + 2)));
            }
        }
        let mut by_entity: BTreeMap<String, Vec<(NaiveDate, Vec<f64>)>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let id = rec[0].to_string();
            let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
                .map_err(|e| Error::data(format!("row {}: bad date `{}`: {e}", line + 2, &rec[1])))?;
            let values = rec
                .iter()
                .skip(2)
                .map(|s| {
                    let v: f64 = s
                        .trim()
                        .parse()
                        .map_err(|e| Error::data(format!("row {}: bad value `{s}`: {e}", line + 2)))?;
                    if v < 0.0 || !v.is_finite() {
                        return Err(Error::data(format!("row {}: consumption must be finite and non-negative", line + 2)));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            if !by_entity.contains_key(&id) {
                order.push(id.clone());
            }
            by_entity.entry(id).or_default().push((date, values));
        }
        let mut entities = Vec::with_capacity(order.len());
        for id in order {
            let mut rows = by_entity.remove(&id).unwrap_or_default();
            rows.sort_by_key(|(d, _)| *d);
            let start = rows[0].0;
            for (i, (d, _)) in rows.iter().enumerate() {
                if *d != start + Duration::days(i as i64) {
                    return Err(Error::data(format!("entity `{id}` has a gap or duplicate at {d}")));
                }
            }
            entities.push(EntitySeries {
                id,
                start,
                days: rows.into_iter().map(|(_, v)| v).collect(),
            });
        }
        Self::new(profile_len, entities)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["entity_id".to_string(), "date".to_string()];
        header.extend((0..self.profile_len).map(|t| format!("h{t:02}")));
        w.write_record(&header)?;
        for e in &self.entities {
            for (n, day) in e.days.iter().enumerate() {
                let mut rec = vec![e.id.clone(), e.date(n).format("%Y-%m-%d").to_string()];
                rec.extend(day.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `y_t = ln(1 + x_t / beta_t)`; zero maps to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationManifest {
    pub scales: Vec<f64>,
    pub transform: String,
    pub version: u32,
}

pub const LOG_TRANSFORM: &str = "zero_preserving_log1p";

impl NormalizationManifest {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::data("normalization scales must be positive"));
        }
        Ok(NormalizationManifest {
            scales,
            transform: LOG_TRANSFORM.to_string(),
            version: 1,
        })
    }

    /// `beta_t` = mean of the positive training values at step `t`, 1 if none.
    pub fn fit(ds: &PanelDataset, split: &DataSplit) -> Result<Self> {
        let mut sums = vec![0.0; ds.profile_len];
        let mut counts = vec![0usize; ds.profile_len];
        for (e, s) in ds.entities.iter().zip(&split.entities) {
            for day in &e.days[..s.train_end] {
                for (t, &v) in day.iter().enumerate() {
                    if v > 0.0 {
                        sums[t] += v;
                        counts[t] += 1;
                    }
                }
            }
        }
        Self::new(
            sums.iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 1.0 })
                .collect(),
        )
    }

    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.scales.len() {
            return Err(Error::config("profile length does not match manifest"));
        }
        raw.iter()
            .zip(&self.scales)
            .map(|(&x, b)| {
                if x < 0.0 || !x.is_finite() {
                    Err(Error::data(format!("consumption must be non-negative, got {x}")))
                } else {
                    Ok((x / b).ln_1p())
                }
            })
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.scales).map(|(v, b)| b * v.exp_m1()).collect()
    }

    pub fn denormalize_at(&self, t: usize, y: f64) -> f64 {
        self.scales[t] * y.exp_m1()
    }

    pub fn normalize_dataset(&self, ds: &PanelDataset) -> Result<PanelDataset> {
        let entities = ds
            .entities
            .iter()
            .map(|e| {
                Ok(EntitySeries {
                    id: e.id.clone(),
                    start: e.start,
                    days: e.days.iter().map(|d| self.normalize(d)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        PanelDataset::new(ds.profile_len, entities)
    }
}

/// `[sin, cos]` of the month (1-12 over 12) and of the weekday
/// (Monday = 0 over 7).
pub fn calendar_features(date: NaiveDate) -> [f64; 4] {
    let m = 2.0 * PI * date.month() as f64 / 12.0;
    let w = 2.0 * PI * date.weekday().num_days_from_monday() as f64 / 7.0;
    [m.sin(), m.cos(), w.sin(), w.cos()]
}

pub const CALENDAR_DIM: usize = 4;

/// Day ranges of one entity: `[0, train_end)` train, `[train_end, val_end)`
/// validation, `[val_end, len)` test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySplit {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub test_days: usize,
    pub entities: Vec<EntitySplit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
}

/// Last `test_days` days of every entity go to test; the rest is cut 3:1
/// into train and validation, in time order (train gets `floor(0.75 R)`).
pub fn split(ds: &PanelDataset, test_days: usize) -> Result<DataSplit> {
    let entities = ds
        .entities
        .iter()
        .map(|e| {
            let n = e.days.len();
            if n <= test_days + 4 {
                return Err(Error::data(format!(
                    "entity `{}` has {n} days; need more than {}",
                    e.id,
                    test_days + 4
                )));
            }
            let rest = n - test_days;
            let train_end = rest * 3 / 4;
            Ok(EntitySplit {
                train_end,
                val_end: rest,
                len: n,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DataSplit { test_days, entities })
}

/// One forecasting example: predict `target` for `date` from the preceding
/// `lookback` days and the calendar.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub entity: usize,
    pub entity_id: String,
    pub day: usize,
    pub date: NaiveDate,
    pub target: Vec<f64>,
    pub lookback: Vec<f64>,
    pub calendar: [f64; 4],
}

fn example_for(ds: &PanelDataset, entity: usize, day: usize, lookback_days: usize) -> Example {
    let e = &ds.entities[entity];
    let date = e.date(day);
    Example {
        entity,
        entity_id: e.id.clone(),
        day,
        date,
        target: e.days[day].clone(),
        lookback: e.days[day - lookback_days..day].concat(),
        calendar: calendar_features(date),
    }
}

/// Examples whose target falls in `part`. Look-back windows may reach back
/// across the boundary into the preceding part (never forward); the first
/// `lookback_days` days of each stream are never targets.
pub fn make_examples(ds: &PanelDataset, split: &DataSplit, part: Part, lookback_days: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for (u, s) in split.entities.iter().enumerate() {
        let (lo, hi) = match part {
            Part::Train => (0, s.train_end),
            Part::Validation => (s.train_end, s.val_end),
            Part::Test => (s.val_end, s.len),
        };
        for day in lo.max(lookback_days)..hi {
            out.push(example_for(ds, u, day, lookback_days));
        }
    }
    out
}

/// Every day of every stream (after the look-back warm-up) as an example.
pub fn make_all_examples(ds: &PanelDataset, lookback_days: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for (u, e) in ds.entities.iter().enumerate() {
        for day in lookback_days..e.days.len() {
            out.push(example_for(ds, u, day, lookback_days));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub entities: usize,
    pub days: usize,
    pub archetypes: usize,
    pub seed: u64,
    pub start: NaiveDate,
    pub profile_len: usize,
    pub noise: bool,
    pub zero_inflation: bool,
    /// Lag-1 correlation of the within-day noise.
    pub ar_coef: f64,
    /// Stationary std of the within-day log-noise.
    pub noise_std: f64,
    /// Day-to-day persistence of the entity log-level.
    pub level_persistence: f64,
    pub level_std: f64,
    pub zero_prob: f64,
    /// Std of the log entity scale.
    pub scale_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 200,
            days: 120,
            archetypes: 3,
            seed: 0,
            start: NaiveDate::from_ymd_opt(2021, 6, 1).expect("valid date"),
            profile_len: 24,
            noise: true,
            zero_inflation: true,
            ar_coef: 0.8,
            noise_std: 0.35,
            level_persistence: 0.7,
            level_std: 0.2,
            zero_prob: 0.02,
            scale_spread: 0.5,
        }
    }
}

/// Everything the generator planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub archetype: Vec<usize>,
    pub entity_scale: Vec<f64>,
    pub base_curves: Vec<Vec<f64>>,
    pub weekday_factors: Vec<[f64; 7]>,
    pub month_factors: [f64; 12],
}

impl SynthTruth {
    /// Noise-free profile of entity `u` on `date`.
    pub fn deterministic_profile(&self, u: usize, date: NaiveDate) -> Vec<f64> {
        let k = self.archetype[u];
        let wd = self.weekday_factors[k][date.weekday().num_days_from_monday() as usize];
        let mf = self.month_factors[date.month0() as usize];
        let scale = self.entity_scale[u];
        self.base_curves[k].iter().map(|b| b * wd * mf * scale).collect()
    }
}

fn bump_curve(len: usize, base: f64, bumps: &[(f64, f64, f64)]) -> Vec<f64> {
    (0..len)
        .map(|i| {
            // positions are given on a 24-hour clock
            let h = i as f64 * 24.0 / len as f64;
            base + bumps
                .iter()
                .map(|(c, a, w)| a * (-(h - c).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
        })
        .collect()
}

fn archetype_curve<R: Rng + ?Sized>(k: usize, len: usize, rng: &mut R) -> (Vec<f64>, [f64; 7]) {
    let home = [1.0, 1.0, 1.0, 1.0, 1.05, 1.2, 1.25];
    match k {
        0 => (bump_curve(len, 0.3, &[(7.5, 0.4, 1.5), (19.5, 1.2, 2.0)]), home),
        1 => (bump_curve(len, 0.25, &[(6.5, 0.9, 1.2), (21.0, 0.8, 1.5)]), home),
        2 => (
            bump_curve(len, 0.2, &[(13.0, 1.5, 3.5)]),
            [1.0, 1.0, 1.0, 1.0, 0.95, 0.45, 0.35],
        ),
        _ => {
            let n = rng.random_range(1..=3);
            let bumps: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(5.0..22.0),
                        rng.random_range(0.4..1.5),
                        rng.random_range(1.0..3.0),
                    )
                })
                .collect();
            let mut wd = [1.0; 7];
            let weekend = rng.random_range(0.4..1.3);
            wd[5] = weekend;
            wd[6] = weekend;
            (bump_curve(len, rng.random_range(0.15..0.35), &bumps), wd)
        }
    }
}

/// Generate a multi-entity panel with planted archetypes.
///
/// `x = base_k(t) * weekday_k * month * scale_u * exp(level_un + e_unt)`,
/// then each hour is zeroed with probability `zero_prob`. `e` is a
/// stationary AR(1) across the hours of a day; `level` is a stationary AR(1)
/// across days.
pub fn synth(cfg: &SynthConfig) -> Result<(PanelDataset, SynthTruth)> {
    if cfg.entities == 0 || cfg.days == 0 || cfg.archetypes == 0 || cfg.profile_len == 0 {
        return Err(Error::config("synthetic sizes must be positive"));
    }
    if !(cfg.ar_coef.abs() < 1.0 && cfg.level_persistence.abs() < 1.0) {
        return Err(Error::config("AR coefficients must lie in (-1, 1)"));
    }
    let mut rng = rng::stream(cfg.seed, &[domain::SYNTH, 0]);
    let (base_curves, weekday_factors): (Vec<_>, Vec<_>) = (0..cfg.archetypes)
        .map(|k| archetype_curve(k, cfg.profile_len, &mut rng))
        .unzip();
    let mut month_factors = [0.0; 12];
    for (m, f) in month_factors.iter_mut().enumerate() {
        *f = 1.0 + 0.15 * (2.0 * PI * m as f64 / 12.0).cos();
    }
    let archetype: Vec<usize> = (0..cfg.entities).map(|u| u % cfg.archetypes).collect();
    let entity_scale: Vec<f64> = (0..cfg.entities)
        .map(|_| (cfg.scale_spread * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let truth = SynthTruth {
        config: cfg.clone(),
        archetype,
        entity_scale,
        base_curves,
        weekday_factors,
        month_factors,
    };

    let innov = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let level_innov = (1.0 - cfg.level_persistence * cfg.level_persistence).sqrt();
    let width = cfg.entities.to_string().len().max(3);
    let entities = (0..cfg.entities)
        .map(|u| {
            let mut r = rng::stream(cfg.seed, &[domain::SYNTH, 1, u as u64]);
            let mut level = cfg.level_std * r.sample::<f64, _>(StandardNormal);
            let days = (0..cfg.days)
                .map(|n| {
                    let date = cfg.start + Duration::days(n as i64);
                    let mut day = truth.deterministic_profile(u, date);
                    if cfg.noise {
                        if n > 0 {
                            level = cfg.level_persistence * level
                                + level_innov * cfg.level_std * r.sample::<f64, _>(StandardNormal);
                        }
                        let mut e = cfg.noise_std * r.sample::<f64, _>(StandardNormal);
                        for (t, v) in day.iter_mut().enumerate() {
                            if t > 0 {
                                e = cfg.ar_coef * e + innov * cfg.noise_std * r.sample::<f64, _>(StandardNormal);
                            }
                            *v *= (level + e).exp();
                        }
                    }
                    if cfg.zero_inflation {
                        for v in day.iter_mut() {
                            if r.random::<f64>() < cfg.zero_prob {
                                *v = 0.0;
                            }
                        }
                    }
                    day
                })
                .collect();
            EntitySeries {
                id: format!("u{u:0width$}"),
                start: cfg.start,
                days,
            }
        })
        .collect();
    Ok((PanelDataset::new(cfg.profile_len, entities)?, truth))
}
