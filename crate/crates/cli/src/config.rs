//! Run configuration file.

use std::path::{Path, PathBuf};

use loadcast::data::{PanelDataset, SynthConfig};
use loadcast::forecast::{DEFAULT_ALPHAS, DEFAULT_BAND_HALF_WIDTH};
use loadcast::pipeline::{ExperimentConfig, ModelKind};
use loadcast::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a command needs. Unknown keys are rejected.
///
/// ```json
/// {
///   "dataset": "panel.csv",
///   "model": "guide-vae",
///   "out_dir": "runs/demo",
///   "experiment": { "network": { "hidden": [64, 64] }, "samples": 200 }
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Panel CSV; when absent the synthetic generator described by `synth`
    /// supplies the data.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelKind,
    pub out_dir: PathBuf,
    /// Restrict forecasts, evaluation and plots to these entities.
    pub entities: Option<Vec<String>>,
    /// Forecast only the first `forecast_days` test days of each entity.
    pub forecast_days: Option<usize>,
    pub band_half_width: usize,
    pub sigma_alphas: Vec<f64>,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            synth: SynthConfig::default(),
            model: ModelKind::GuideVae,
            out_dir: PathBuf::from("run"),
            entities: None,
            forecast_days: None,
            band_half_width: DEFAULT_BAND_HALF_WIDTH,
            sigma_alphas: DEFAULT_ALPHAS.to_vec(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub entities: Option<Vec<String>>,
    pub model: Option<ModelKind>,
    pub samples: Option<usize>,
    pub is_samples: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.synth.seed = s;
            cfg.experiment = cfg.experiment.with_seed(s);
        }
        if let Some(d) = &o.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(e) = &o.entities {
            cfg.entities = Some(e.clone());
        }
        if let Some(m) = o.model {
            cfg.model = m;
        }
        if let Some(s) = o.samples {
            cfg.experiment.samples = s;
        }
        if let Some(s) = o.is_samples {
            cfg.experiment.is_samples = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if self.dataset.is_none() && (self.synth.entities == 0 || self.synth.days == 0) {
            return Err(Error::Config("synthetic panel needs entities and days".into()));
        }
        if self.forecast_days == Some(0) {
            return Err(Error::Config("forecast_days must be positive".into()));
        }
        if self.sigma_alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("sigma_alphas must be finite".into()));
        }
        Ok(())
    }

    /// The raw (unnormalized) panel.
    pub fn load_dataset(&self) -> Result<PanelDataset> {
        match &self.dataset {
            Some(p) if !p.is_file() => Err(Error::Config(format!("dataset {} does not exist", p.display()))),
            Some(p) => PanelDataset::read_csv(p),
            None => Ok(loadcast::data::synth(&self.synth)?.0),
        }
    }
}
