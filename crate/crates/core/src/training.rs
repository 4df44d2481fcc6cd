//! Minibatch training loop shared by the VAE and the quantile baseline:
//! Adam steps, validation after every epoch, plateau learning-rate decay,
//! early stopping and restoration of the best-validation parameters.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamGroup};
use crate::rng::{self, domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Linear KL warm-up length in epochs; 0 disables annealing.
    pub kl_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 200,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_patience: 5,
            early_stop_patience: 12,
            seed: 0,
            kl_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("learning_rate must be positive and lr_decay in (0, 1]"));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("patience values must be at least 1"));
        }
        Ok(())
    }

    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// Anything with parameters the optimizer can update.
pub trait Trainable: Clone + Sync {
    fn num_params(&self) -> usize;
    fn param_groups_mut(&mut self) -> Vec<ParamGroup<'_>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub metric: String,
    pub initial_val: f64,
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// CSV with columns `epoch, train_<metric>, val_<metric>, lr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_{m},val_{m},lr", m = self.metric)?;
        for r in &self.records {
            writeln!(f, "{},{},{},{}", r.epoch, r.train, r.val, r.lr)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Sum per-example objectives and gradients over a batch.
///
/// The batch is cut into fixed chunks that may run on different threads;
/// chunk sums are combined in chunk order, so the result does not depend on
/// the number of threads.
pub fn batch_gradient<F>(batch: &[usize], num_params: usize, per_example: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync,
{
    const CHUNK: usize = 8;
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0; num_params];
            let mut total = 0.0;
            for &i in chunk {
                total += per_example(i, &mut grads)?;
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = vec![0.0; num_params];
    for p in partials {
        let (t, g) = p?;
        total += t;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grads))
}

/// Hooks the loop calls into.
pub trait Objective<M> {
    /// Mean objective over `batch` and the gradient of the quantity to
    /// *minimize* (already averaged over the batch).
    fn batch(&mut self, model: &M, batch: &[usize], epoch: usize, batch_index: usize) -> Result<(f64, Vec<f64>)>;

    /// Validation metric in the same direction as the objective.
    fn validate(&mut self, model: &M) -> Result<f64>;
}

pub fn fit<M: Trainable, O: Objective<M>>(
    model: &mut M,
    num_examples: usize,
    cfg: &TrainConfig,
    direction: Direction,
    metric: &str,
    objective: &mut O,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if num_examples == 0 {
        return Err(Error::data("training split is empty"));
    }
    let better = |new: f64, old: f64| match direction {
        Direction::Maximize => new > old,
        Direction::Minimize => new < old,
    };
    let check = |v: f64, epoch: usize, batch: usize, what: &str| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Divergence {
                epoch,
                batch,
                reason: format!("{what} is {v}"),
            })
        }
    };

    let initial_val = check(objective.validate(model)?, 0, 0, "initial validation metric")?;
    let mut best_val = initial_val;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut adam = AdamState::new(model.num_params(), cfg.learning_rate);
    let mut since_improve = 0;
    let mut since_decay = 0;
    let mut records = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..num_examples).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[domain::SHUFFLE, epoch as u64]));
        let mut train_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (mean, grads) = objective.batch(model, batch, epoch, b)?;
            check(mean, epoch, b, "training objective")?;
            adam.step(&mut model.param_groups_mut(), &grads).map_err(|e| match e {
                Error::NonFinite { location } => Error::Divergence {
                    epoch,
                    batch: b,
                    reason: format!("non-finite gradient at {location}"),
                },
                other => other,
            })?;
            train_sum += mean * batch.len() as f64;
            seen += batch.len();
        }
        let val = check(objective.validate(model)?, epoch, 0, "validation metric")?;
        records.push(EpochRecord {
            epoch,
            train: train_sum / seen as f64,
            val,
            lr: adam.learning_rate,
        });
        if better(val, best_val) {
            best_val = val;
            best_model = model.clone();
            best_epoch = epoch;
            since_improve = 0;
            since_decay = 0;
        } else {
            since_improve += 1;
            since_decay += 1;
            if since_decay >= cfg.lr_patience {
                adam.learning_rate *= cfg.lr_decay;
                since_decay = 0;
            }
            if since_improve >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    *model = best_model;
    Ok(TrainingLog {
        metric: metric.to_string(),
        initial_val,
        records,
        best_epoch,
        best_val,
        stopped_early,
    })
}
