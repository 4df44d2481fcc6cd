//! End-to-end runs: normalize and split a panel, fit embeddings, train a
//! model variant and score it on the test span. Used by the CLI's `ablate`
//! command and by the end-to-end tests.

use serde::{Deserialize, Serialize};

use crate::condition::{ConditionedSet, Conditioner};
use crate::cvae::{self, CvaeModel, NetworkConfig};
use crate::data::{self, DataSplit, Example, NormalizationManifest, PanelDataset, Part};
use crate::embeddings::{fit_embeddings, EmbeddingParams, EmbeddingTable};
use crate::error::{Error, Result};
use crate::forecast::{check_levels, DEFAULT_LEVELS, DEFAULT_SAMPLES};
use crate::metrics::{self, CvaeEvalSettings, EvalReport};
use crate::qrnn::{self, QrnnConfig, QrnnModel};
use crate::training::{TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub test_days: usize,
    pub lookback_days: usize,
    pub embedding: EmbeddingParams,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub qrnn: QrnnConfig,
    /// Training settings for the quantile network; defaults to `training`.
    pub qrnn_training: Option<TrainConfig>,
    pub levels: Vec<f64>,
    pub samples: usize,
    pub is_samples: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            test_days: 73,
            lookback_days: 1,
            embedding: EmbeddingParams::default(),
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            qrnn: QrnnConfig::default(),
            qrnn_training: None,
            levels: DEFAULT_LEVELS.to_vec(),
            samples: DEFAULT_SAMPLES,
            is_samples: 100,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_levels(&self.levels).map_err(|e| Error::config(e.to_string()))?;
        metrics::level_pairs(&self.levels)?;
        check_levels(&self.qrnn.levels).map_err(|e| Error::config(e.to_string()))?;
        if self.lookback_days == 0 || self.test_days == 0 {
            return Err(Error::config("lookback_days and test_days must be positive"));
        }
        if self.samples == 0 || self.is_samples == 0 {
            return Err(Error::config("samples and is_samples must be positive"));
        }
        if self.network.latent_dim == 0 || !(self.network.jitter > 0.0) {
            return Err(Error::config("latent_dim and jitter must be positive"));
        }
        self.training.validate()?;
        if let Some(t) = &self.qrnn_training {
            t.validate()?;
        }
        Ok(())
    }

    /// Copy with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.embedding.seed = seed;
        c.training.seed = seed;
        if let Some(t) = c.qrnn_training.as_mut() {
            t.seed = seed;
        }
        c
    }
}

/// A normalized, split panel with its examples.
pub struct Prepared {
    pub raw: PanelDataset,
    pub normalized: PanelDataset,
    pub split: DataSplit,
    pub manifest: NormalizationManifest,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub entity_ids: Vec<String>,
}

pub fn prepare(raw: PanelDataset, test_days: usize, lookback_days: usize) -> Result<Prepared> {
    let split = data::split(&raw, test_days)?;
    let manifest = NormalizationManifest::fit(&raw, &split)?;
    let normalized = manifest.normalize_dataset(&raw)?;
    let train = data::make_examples(&normalized, &split, Part::Train, lookback_days);
    let val = data::make_examples(&normalized, &split, Part::Validation, lookback_days);
    let test = data::make_examples(&normalized, &split, Part::Test, lookback_days);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::data("a split has no examples after the look-back warm-up"));
    }
    let entity_ids = normalized.entities.iter().map(|e| e.id.clone()).collect();
    Ok(Prepared {
        raw,
        normalized,
        split,
        manifest,
        train,
        val,
        test,
        entity_ids,
    })
}

impl Prepared {
    /// Fit entity embeddings on normalized training-span profiles; `None`
    /// when `params.size` is 0.
    pub fn embeddings(&self, params: &EmbeddingParams) -> Result<Option<EmbeddingTable>> {
        if params.size == 0 {
            return Ok(None);
        }
        let profiles: Vec<(String, Vec<Vec<f64>>)> = self
            .normalized
            .entities
            .iter()
            .zip(&self.split.entities)
            .map(|(e, s)| (e.id.clone(), e.days[..s.train_end].to_vec()))
            .collect();
        fit_embeddings(&profiles, params).map(Some)
    }

    pub fn conditioner(&self, table: Option<&EmbeddingTable>, lookback_days: usize) -> Result<Conditioner> {
        Conditioner::new(&self.entity_ids, table, lookback_days * self.normalized.profile_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GuideVae,
    Qrnn,
}

/// One row of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub kind: ModelKind,
    pub embed_size: usize,
    /// Pattern dictionary size; for the quantile network it only sets the
    /// VAE whose parameter count is matched.
    pub dict_size: usize,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::GuideVae => format!("GUIDE-VAE K={} V={}", self.embed_size, self.dict_size),
            ModelKind::Qrnn => format!("QRNN K={}", self.embed_size),
        }
    }
}

/// Four VAE variants (K x V in {0, k} x {0, v}) and two quantile networks.
pub fn ablation_grid(k: usize, v: usize) -> Vec<Variant> {
    let vae = |embed_size, dict_size| Variant {
        kind: ModelKind::GuideVae,
        embed_size,
        dict_size,
    };
    let q = |embed_size| Variant {
        kind: ModelKind::Qrnn,
        embed_size,
        dict_size: v,
    };
    vec![vae(0, 0), vae(0, v), vae(k, 0), vae(k, v), q(0), q(k)]
}

pub enum TrainedModel {
    Cvae(CvaeModel),
    Qrnn(QrnnModel),
}

pub struct VariantRun {
    pub variant: Variant,
    pub model: TrainedModel,
    pub log: TrainingLog,
    pub report: EvalReport,
    pub embeddings: Option<EmbeddingTable>,
}

/// Parameter count of the VAE the configuration describes.
pub fn cvae_param_count(target_dim: usize, cond_dim: usize, net: &NetworkConfig) -> Result<usize> {
    Ok(CvaeModel::new(target_dim, cond_dim, net, 0)?.num_params())
}

pub fn train_cvae(p: &Prepared, conditioner: &Conditioner, cfg: &ExperimentConfig) -> Result<(CvaeModel, TrainingLog)> {
    let mut model = CvaeModel::new(p.normalized.profile_len, conditioner.cond_dim(), &cfg.network, cfg.seed)?;
    let train = ConditionedSet {
        examples: &p.train,
        conditioner,
    };
    let val = ConditionedSet {
        examples: &p.val,
        conditioner,
    };
    let log = cvae::train(&mut model, &train, &val, &cfg.training)?;
    Ok((model, log))
}

pub fn train_qrnn(p: &Prepared, conditioner: &Conditioner, cfg: &ExperimentConfig) -> Result<(QrnnModel, TrainingLog)> {
    let t = p.normalized.profile_len;
    let budget = cvae_param_count(t, conditioner.cond_dim(), &cfg.network)?;
    let mut model = QrnnModel::with_budget(t, conditioner.cond_dim(), &cfg.qrnn, budget, cfg.seed)?;
    let train = ConditionedSet {
        examples: &p.train,
        conditioner,
    };
    let val = ConditionedSet {
        examples: &p.val,
        conditioner,
    };
    let tcfg = cfg.qrnn_training.as_ref().unwrap_or(&cfg.training);
    let log = qrnn::train(&mut model, &train, &val, tcfg)?;
    Ok((model, log))
}

pub fn run_variant(p: &Prepared, cfg: &ExperimentConfig, variant: Variant) -> Result<VariantRun> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.embedding.size = variant.embed_size;
    cfg.network.dict_size = variant.dict_size;
    let table = p.embeddings(&cfg.embedding)?;
    let conditioner = p.conditioner(table.as_ref(), cfg.lookback_days)?;
    let (model, log, report) = match variant.kind {
        ModelKind::GuideVae => {
            let (m, log) = train_cvae(p, &conditioner, &cfg)?;
            let settings = CvaeEvalSettings {
                levels: &cfg.levels,
                samples: cfg.samples,
                is_samples: cfg.is_samples,
                seed: cfg.seed,
                manifest: Some(&p.manifest),
            };
            let report = metrics::evaluate_cvae(&m, &conditioner, &p.test, &settings)?;
            (TrainedModel::Cvae(m), log, report)
        }
        ModelKind::Qrnn => {
            let (m, log) = train_qrnn(p, &conditioner, &cfg)?;
            let report = metrics::evaluate_qrnn(&m, &conditioner, &p.test, Some(&p.manifest))?;
            (TrainedModel::Qrnn(m), log, report)
        }
    };
    Ok(VariantRun {
        variant,
        model,
        log,
        report,
        embeddings: table,
    })
}

/// Ordering checks between ablation rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingSummary {
    /// Full model beats the plain model on quantile loss, interval score and ALL.
    pub full_beats_plain: Option<bool>,
    /// Full model beats the quantile network on quantile loss and interval score.
    pub full_beats_qrnn: Option<bool>,
    /// `ALL(K=0,V=v) - ALL(K=0,V=0)` and `ALL(K=k,V=0) - ALL(K=0,V=0)`.
    pub dictionary_gain: Option<f64>,
    pub embedding_gain: Option<f64>,
}

fn find<'a>(rows: &'a [(Variant, Result<EvalReport>)], kind: ModelKind, k: usize, v: Option<usize>) -> Option<&'a EvalReport> {
    rows.iter().find_map(|(var, r)| {
        let hit = var.kind == kind && var.embed_size == k && v.is_none_or(|v| var.dict_size == v);
        if hit {
            r.as_ref().ok()
        } else {
            None
        }
    })
}

pub fn full_beats_plain(full: &EvalReport, plain: &EvalReport) -> bool {
    full.quantile_loss < plain.quantile_loss
        && full.interval < plain.interval
        && matches!((full.all, plain.all), (Some(a), Some(b)) if a > b)
}

pub fn full_beats_qrnn(full: &EvalReport, q: &EvalReport) -> bool {
    full.quantile_loss < q.quantile_loss && full.interval < q.interval
}

pub fn summarize(rows: &[(Variant, Result<EvalReport>)], k: usize, v: usize) -> OrderingSummary {
    let full = find(rows, ModelKind::GuideVae, k, Some(v));
    let plain = find(rows, ModelKind::GuideVae, 0, Some(0));
    let dict_only = find(rows, ModelKind::GuideVae, 0, Some(v));
    let emb_only = find(rows, ModelKind::GuideVae, k, Some(0));
    let q = find(rows, ModelKind::Qrnn, k, None);
    let gain = |a: Option<&EvalReport>| match (a.and_then(|r| r.all), plain.and_then(|r| r.all)) {
        (Some(x), Some(y)) => Some(x - y),
        _ => None,
    };
    OrderingSummary {
        full_beats_plain: full.zip(plain).map(|(f, p)| full_beats_plain(f, p)),
        full_beats_qrnn: full.zip(q).map(|(f, q)| full_beats_qrnn(f, q)),
        dictionary_gain: gain(dict_only),
        embedding_gain: gain(emb_only),
    }
}

/// Run every variant; failures are kept as rows rather than aborting.
pub fn run_ablation(p: &Prepared, cfg: &ExperimentConfig, variants: &[Variant]) -> Vec<(Variant, Result<EvalReport>)> {
    variants
        .iter()
        .map(|&v| (v, run_variant(p, cfg, v).map(|r| r.report)))
        .collect()
}
