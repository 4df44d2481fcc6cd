//! Quantile-regression network baseline.
//!
//! An MLP maps the conditioning vector to `Q * T` raw outputs. Level 0 is
//! read directly and every later level adds a softplus increment, so the
//! predicted quantiles never cross.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionedData, ThetaDraw};
use crate::error::{Error, Result};
use crate::forecast::{check_levels, QuantileFan, DEFAULT_LEVELS};
use crate::nn::{sigmoid, softplus, Activation, DenseNet, ForwardCache, ParamGroup};
use crate::rng::{self, domain};
use crate::training::{self, batch_gradient, Direction, Objective, TrainConfig, Trainable, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QrnnConfig {
    /// Explicit hidden widths; when absent they are fitted to a parameter
    /// budget (usually the VAE's parameter count).
    pub hidden: Option<Vec<usize>>,
    pub hidden_layers: usize,
    pub levels: Vec<f64>,
    /// Allowed relative mismatch against the parameter budget.
    pub budget_tolerance: f64,
}

impl Default for QrnnConfig {
    fn default() -> Self {
        QrnnConfig {
            hidden: None,
            hidden_layers: 2,
            levels: DEFAULT_LEVELS.to_vec(),
            budget_tolerance: 0.02,
        }
    }
}

/// Parameter count of a fully connected ReLU net with the given widths.
pub fn mlp_param_count(input: usize, hidden: &[usize], output: usize) -> usize {
    let mut prev = input;
    let mut n = 0;
    for &h in hidden.iter().chain(std::iter::once(&output)) {
        n += prev * h + h;
        prev = h;
    }
    n
}

/// Hidden widths whose total parameter count is within `tolerance` of
/// `budget`. Equal widths are preferred; failing that, one outer width is
/// solved for with the remaining widths equal.
pub fn fit_hidden_widths(input: usize, output: usize, layers: usize, budget: usize, tolerance: f64) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::config("the quantile network needs at least one hidden layer"));
    }
    let target = budget as f64;
    let err = |h: &[usize]| (mlp_param_count(input, h, output) as f64 - target).abs() / target;
    let mut equal = vec![1; layers];
    let mut h = 1;
    while mlp_param_count(input, &vec![h; layers], output) as f64 <= target * 2.0 && h < 1 << 20 {
        if err(&vec![h; layers]) < err(&equal) {
            equal = vec![h; layers];
        }
        h += 1;
    }
    if err(&equal) <= tolerance || layers == 1 {
        return check_fit(equal, err, budget, tolerance);
    }
    // the count is affine in any single width; solve for the last, then
    // the first, with the others held equal
    let mut best = equal.clone();
    for pos in [layers - 1, 0] {
        for h in 1..=equal[0] * 2 {
            let mut cand = vec![h; layers];
            cand[pos] = 0;
            let c0 = mlp_param_count(input, &cand, output) as f64;
            cand[pos] = 1;
            let slope = mlp_param_count(input, &cand, output) as f64 - c0;
            cand[pos] = ((target - c0) / slope).round().max(1.0) as usize;
            if err(&cand) < err(&best) {
                best = cand;
            }
        }
    }
    check_fit(best, err, budget, tolerance)
}

fn check_fit(widths: Vec<usize>, err: impl Fn(&[usize]) -> f64, budget: usize, tolerance: f64) -> Result<Vec<usize>> {
    let rel = err(&widths);
    if rel > tolerance {
        return Err(Error::config(format!(
            "no hidden widths reach a parameter budget of {budget} within {:.1}% (closest {widths:?}, off by {:.1}%)",
            tolerance * 100.0,
            rel * 100.0
        )));
    }
    Ok(widths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QrnnModel {
    target_dim: usize,
    levels: Vec<f64>,
    net: DenseNet,
}

/// Mean pinball loss over levels and time steps.
pub fn pinball_loss(levels: &[f64], predicted: &[Vec<f64>], truth: &[f64]) -> f64 {
    let mut total = 0.0;
    for (q, row) in levels.iter().zip(predicted) {
        for (y, x) in row.iter().zip(truth) {
            let e = x - y;
            total += if e >= 0.0 { q * e } else { (q - 1.0) * e };
        }
    }
    total / (levels.len() * truth.len()) as f64
}

fn pinball_slope(q: f64, e: f64) -> f64 {
    // d/dy of rho_q(x - y)
    if e > 0.0 {
        -q
    } else if e < 0.0 {
        1.0 - q
    } else {
        0.0
    }
}

impl QrnnModel {
    pub fn new(target_dim: usize, cond_dim: usize, hidden: &[usize], levels: &[f64], seed: u64) -> Result<Self> {
        check_levels(levels)?;
        if target_dim == 0 || cond_dim == 0 {
            return Err(Error::config("quantile network dimensions must be positive"));
        }
        let mut r = rng::stream(seed, &[domain::INIT, 1]);
        let net = DenseNet::mlp(
            cond_dim,
            hidden,
            levels.len() * target_dim,
            Activation::Relu,
            Activation::Identity,
            &mut r,
        )?;
        Ok(QrnnModel {
            target_dim,
            levels: levels.to_vec(),
            net,
        })
    }

    /// Size the hidden layers per `cfg`, matching `budget` when no explicit
    /// widths are given.
    pub fn with_budget(target_dim: usize, cond_dim: usize, cfg: &QrnnConfig, budget: usize, seed: u64) -> Result<Self> {
        let hidden = match &cfg.hidden {
            Some(h) => h.clone(),
            None => fit_hidden_widths(
                cond_dim,
                cfg.levels.len() * target_dim,
                cfg.hidden_layers,
                budget,
                cfg.budget_tolerance,
            )?,
        };
        Self::new(target_dim, cond_dim, &hidden, &cfg.levels, seed)
    }

    pub fn from_net(target_dim: usize, levels: &[f64], net: DenseNet) -> Result<Self> {
        check_levels(levels)?;
        if net.output_dim() != levels.len() * target_dim {
            return Err(Error::argument("network output does not match levels x target_dim"));
        }
        Ok(QrnnModel {
            target_dim,
            levels: levels.to_vec(),
            net,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn assemble(&self, raw: &[f64]) -> Vec<Vec<f64>> {
        let t_dim = self.target_dim;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.levels.len());
        out.push(raw[..t_dim].to_vec());
        for i in 1..self.levels.len() {
            let prev = &out[i - 1];
            let row = (0..t_dim).map(|t| prev[t] + softplus(raw[i * t_dim + t])).collect();
            out.push(row);
        }
        out
    }

    pub fn predict(&self, c: &[f64]) -> Result<QuantileFan> {
        if c.len() != self.cond_dim() {
            return Err(Error::argument(format!(
                "condition has length {}, expected {}",
                c.len(),
                self.cond_dim()
            )));
        }
        let raw = self.net.forward(c)?;
        Ok(QuantileFan {
            levels: self.levels.clone(),
            values: self.assemble(&raw),
        })
    }

    /// Pinball loss for one example; its gradient is added into `grads`.
    pub fn loss_and_grad(&self, x: &[f64], c: &[f64], grads: &mut [f64]) -> Result<f64> {
        if x.len() != self.target_dim {
            return Err(Error::argument("target length does not match the model"));
        }
        let mut cache = ForwardCache::default();
        let raw = self.net.forward_cached(c, &mut cache)?;
        let pred = self.assemble(&raw);
        let loss = pinball_loss(&self.levels, &pred, x);
        let (q_n, t_dim) = (self.levels.len(), self.target_dim);
        let scale = 1.0 / (q_n * t_dim) as f64;
        let mut upstream = vec![0.0; q_n * t_dim];
        for t in 0..t_dim {
            // running sum of dL/dy_i for i >= j, walking j downwards
            let mut tail = 0.0;
            for j in (0..q_n).rev() {
                tail += scale * pinball_slope(self.levels[j], x[t] - pred[j][t]);
                upstream[j * t_dim + t] = if j == 0 { tail } else { tail * sigmoid(raw[j * t_dim + t]) };
            }
        }
        self.net.backward(&cache, &upstream, grads)?;
        Ok(loss)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let m: QrnnModel = serde_json::from_slice(&bytes)?;
        let net = DenseNet::from_parts(m.net.layers().to_vec(), m.net.params().to_vec())?;
        Self::from_net(m.target_dim, &m.levels, net)
    }
}

impl Trainable for QrnnModel {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn param_groups_mut(&mut self) -> Vec<ParamGroup<'_>> {
        vec![ParamGroup {
            name: "qrnn",
            values: self.net.params_mut(),
        }]
    }
}

/// Mean pinball loss with entity context at its Dirichlet mean.
pub fn mean_pinball<D: ConditionedData>(model: &QrnnModel, data: &D) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let values: Vec<Result<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let fan = model.predict(&data.condition(i, ThetaDraw::Mean))?;
            Ok(pinball_loss(&model.levels, &fan.values, data.target(i)))
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / data.len() as f64)
}

struct PinballObjective<'a, D, E> {
    train: &'a D,
    val: &'a E,
}

impl<D: ConditionedData, E: ConditionedData> Objective<QrnnModel> for PinballObjective<'_, D, E> {
    fn batch(&mut self, model: &QrnnModel, batch: &[usize], _: usize, _: usize) -> Result<(f64, Vec<f64>)> {
        let data = self.train;
        let (total, mut grads) = batch_gradient(batch, model.num_params(), |i, g| {
            model.loss_and_grad(data.target(i), &data.condition(i, ThetaDraw::Mean), g)
        })?;
        let n = batch.len() as f64;
        grads.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, grads))
    }

    fn validate(&mut self, model: &QrnnModel) -> Result<f64> {
        mean_pinball(model, self.val)
    }
}

/// Minimize the pinball loss, early-stopping on the validation loss.
pub fn train<D: ConditionedData, E: ConditionedData>(
    model: &mut QrnnModel,
    train: &D,
    val: &E,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    let mut objective = PinballObjective { train, val };
    training::fit(model, train.len(), cfg, Direction::Minimize, "pinball", &mut objective)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_hand_values() {
        // q = 0.9: under-prediction by 1 costs 0.9, over-prediction 0.1
        assert!((pinball_loss(&[0.9], &[vec![0.0]], &[1.0]) - 0.9).abs() < 1e-15);
        assert!((pinball_loss(&[0.9], &[vec![1.0]], &[0.0]) - 0.1).abs() < 1e-15);
        assert_eq!(pinball_loss(&[0.3], &[vec![2.0]], &[2.0]), 0.0);
    }

    #[test]
    fn predictions_never_cross() {
        let m = QrnnModel::new(5, 3, &[8], &DEFAULT_LEVELS, 7).unwrap();
        let fan = m.predict(&[10.0, -4.0, 2.0]).unwrap();
        assert!(fan.is_monotone());
    }

    #[test]
    fn budget_matching_within_tolerance() {
        let h = fit_hidden_widths(40, 11 * 24, 2, 353_276, 0.02).unwrap();
        let n = mlp_param_count(40, &h, 11 * 24) as f64;
        assert!((n - 353_276.0).abs() / 353_276.0 <= 0.02, "{h:?} gives {n}");
    }

    #[test]
    fn small_budget_uses_unequal_widths() {
        let h = fit_hidden_widths(31, 11 * 24, 2, 2920, 0.02).unwrap();
        let n = mlp_param_count(31, &h, 11 * 24) as f64;
        assert!((n - 2920.0).abs() / 2920.0 <= 0.02, "{h:?} gives {n}");
        // neither equal widths nor a free last width fit here
        let h = fit_hidden_widths(28, 11 * 24, 2, 1304, 0.02).unwrap();
        assert_ne!(h[0], h[1]);
        assert!((mlp_param_count(28, &h, 11 * 24) as f64 - 1304.0).abs() / 1304.0 <= 0.02);
    }

    #[test]
    fn tiny_budget_is_a_config_error() {
        assert!(matches!(fit_hidden_widths(40, 264, 2, 10, 0.02), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_formula() {
        let m = QrnnModel::new(2, 3, &[4, 5], &[0.1, 0.9], 0).unwrap();
        assert_eq!(m.num_params(), mlp_param_count(3, &[4, 5], 4));
        assert_eq!(m.num_params(), 3 * 4 + 4 + 4 * 5 + 5 + 5 * 4 + 4);
    }
}
