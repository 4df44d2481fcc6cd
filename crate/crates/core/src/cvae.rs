//! Conditional VAE with a pattern-dictionary Gaussian likelihood.
//!
//! Encoder `q(z | x, c) = N(mu_z, diag(sigma_z^2))`, prior `N(0, I)`, and
//! likelihood `p(x | z, c) = N(f_mu(z, c), U diag(f_s(z, c))^2 U^T + xi I)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionedData, ThetaDraw};
use crate::error::{Error, Result};
use crate::lowrank::{diag_normal_log_density, LowRankGaussian, PatternBasis};
use crate::nn::{Activation, DenseNet, ForwardCache, GradientTape, ParamGroup};
use crate::rng::{self, domain};
use crate::training::{self, batch_gradient, Direction, Objective, TrainConfig, Trainable, TrainingLog};

pub const LOG_SIGMA_BOUND: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Pattern dictionary size `V`; 0 selects the diagonal covariance.
    pub dict_size: usize,
    pub jitter: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![256, 256],
            latent_dim: 16,
            dict_size: 100,
            jitter: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    target_dim: usize,
    cond_dim: usize,
    latent_dim: usize,
    encoder: DenseNet,
    decoder_mean: DenseNet,
    decoder_aux: DenseNet,
    basis: Arc<PatternBasis>,
    jitter: f64,
}

/// The two ELBO terms for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// `KL(N(mu, diag(exp(log_sigma))^2) || N(0, I))`.
pub fn kl_to_standard_normal(mu: &[f64], log_sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_sigma)
        .map(|(m, l)| m * m + (2.0 * l).exp() - 1.0 - 2.0 * l)
        .sum::<f64>()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl CvaeModel {
    pub fn new(target_dim: usize, cond_dim: usize, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        if target_dim == 0 || cfg.latent_dim == 0 {
            return Err(Error::config("target and latent dimensions must be positive"));
        }
        if !(cfg.jitter > 0.0) {
            return Err(Error::config("jitter must be positive"));
        }
        let z = cfg.latent_dim;
        let mut r = rng::stream(seed, &[domain::INIT]);
        let encoder = DenseNet::mlp(target_dim + cond_dim, &cfg.hidden, 2 * z, Activation::Relu, Activation::Identity, &mut r)?;
        let decoder_mean = DenseNet::mlp(z + cond_dim, &cfg.hidden, target_dim, Activation::Relu, Activation::Identity, &mut r)?;
        let basis = PatternBasis::random(target_dim, cfg.dict_size, &mut r);
        let decoder_aux = DenseNet::mlp(z + cond_dim, &cfg.hidden, basis.aux_len(), Activation::Relu, Activation::Softplus, &mut r)?;
        Self::from_parts(encoder, decoder_mean, decoder_aux, basis, cfg.jitter)
    }

    /// Assemble a model from explicit networks; dimensions are checked.
    pub fn from_parts(
        encoder: DenseNet,
        decoder_mean: DenseNet,
        decoder_aux: DenseNet,
        basis: PatternBasis,
        jitter: f64,
    ) -> Result<Self> {
        let target_dim = decoder_mean.output_dim();
        if encoder.output_dim() % 2 != 0 {
            return Err(Error::config("encoder must emit (mean, log std) pairs"));
        }
        let latent_dim = encoder.output_dim() / 2;
        if encoder.input_dim() < target_dim {
            return Err(Error::config("encoder input is narrower than the target"));
        }
        let cond_dim = encoder.input_dim() - target_dim;
        if decoder_mean.input_dim() != latent_dim + cond_dim || decoder_aux.input_dim() != latent_dim + cond_dim {
            return Err(Error::config(format!(
                "decoders must take {} inputs (latent {latent_dim} + condition {cond_dim})",
                latent_dim + cond_dim
            )));
        }
        if basis.dim() != target_dim || decoder_aux.output_dim() != basis.aux_len() {
            return Err(Error::config("auxiliary head does not match the pattern basis"));
        }
        if decoder_aux.layers().last().map(|l| l.activation) != Some(Activation::Softplus) {
            return Err(Error::config("auxiliary head must end in softplus"));
        }
        Ok(CvaeModel {
            target_dim,
            cond_dim,
            latent_dim,
            encoder,
            decoder_mean,
            decoder_aux,
            basis: Arc::new(basis),
            jitter,
        })
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Load a checkpoint written by [`CvaeModel::save_json`], re-checking
    /// every dimension.
    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        serde_json::from_slice::<CvaeModel>(&bytes)?.revalidated()
    }

    pub(crate) fn revalidated(self) -> Result<Self> {
        let net = |n: DenseNet| DenseNet::from_parts(n.layers().to_vec(), n.params().to_vec());
        Self::from_parts(
            net(self.encoder)?,
            net(self.decoder_mean)?,
            net(self.decoder_aux)?,
            Arc::unwrap_or_clone(self.basis),
            self.jitter,
        )
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn basis(&self) -> &Arc<PatternBasis> {
        &self.basis
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder_mean(&self) -> &DenseNet {
        &self.decoder_mean
    }

    pub fn decoder_aux(&self) -> &DenseNet {
        &self.decoder_aux
    }

    /// Learnable parameter count: three networks plus the dictionary.
    pub fn num_params(&self) -> usize {
        self.encoder.num_params()
            + self.decoder_mean.num_params()
            + self.decoder_aux.num_params()
            + self.basis.learnable_len()
    }

    fn ranges(&self) -> [std::ops::Range<usize>; 4] {
        let e = self.encoder.num_params();
        let m = e + self.decoder_mean.num_params();
        let a = m + self.decoder_aux.num_params();
        [0..e, e..m, m..a, a..a + self.basis.learnable_len()]
    }

    pub fn param_path(&self, index: usize) -> String {
        let r = self.ranges();
        if r[0].contains(&index) {
            format!("encoder.{}", self.encoder.param_path(index))
        } else if r[1].contains(&index) {
            format!("decoder_mean.{}", self.decoder_mean.param_path(index - r[1].start))
        } else if r[2].contains(&index) {
            format!("decoder_aux.{}", self.decoder_aux.param_path(index - r[2].start))
        } else {
            format!("dictionary[{}]", index - r[3].start)
        }
    }

    /// Flat copy of all parameters in gradient order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.encoder.params());
        out.extend_from_slice(self.decoder_mean.params());
        out.extend_from_slice(self.decoder_aux.params());
        if let PatternBasis::Dictionary(u) = &*self.basis {
            out.extend_from_slice(u.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config("parameter vector has the wrong length"));
        }
        let mut off = 0;
        for g in self.param_groups_mut() {
            let n = g.values.len();
            g.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check(&self, x: Option<&[f64]>, c: &[f64]) -> Result<()> {
        if c.len() != self.cond_dim {
            return Err(Error::config(format!(
                "condition has {} entries, model expects {}",
                c.len(),
                self.cond_dim
            )));
        }
        if let Some(x) = x {
            if x.len() != self.target_dim {
                return Err(Error::config(format!(
                    "target has {} entries, model expects {}",
                    x.len(),
                    self.target_dim
                )));
            }
        }
        Ok(())
    }

    /// Posterior parameters `(mu_z, log sigma_z)`; log sigma is clamped to
    /// `[-8, 8]`.
    pub fn encode(&self, x: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(Some(x), c)?;
        let h = self.encoder.forward(&[x, c].concat())?;
        let (mu, raw) = h.split_at(self.latent_dim);
        Ok((
            mu.to_vec(),
            raw.iter().map(|v| v.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)).collect(),
        ))
    }

    /// The likelihood component `p(x | z, c)`.
    pub fn decode(&self, z: &[f64], c: &[f64]) -> Result<LowRankGaussian> {
        self.check(None, c)?;
        if z.len() != self.latent_dim {
            return Err(Error::config("latent vector has the wrong length"));
        }
        let input = [z, c].concat();
        let mu = self.decoder_mean.forward(&input)?;
        let aux = self.decoder_aux.forward(&input)?;
        LowRankGaussian::new(mu, self.basis.clone(), aux, self.jitter)
    }

    /// Reparameterized single-sample ELBO with the standard-normal noise
    /// `eps` supplied by the caller. The KL term is weighted by `kl_weight`.
    /// When `grads` is given, the gradient of the returned ELBO with respect
    /// to every parameter is *added* into it (gradient order of
    /// [`CvaeModel::flat_params`]).
    pub fn elbo_with_noise(
        &self,
        x: &[f64],
        c: &[f64],
        eps: &[f64],
        kl_weight: f64,
        grads: Option<&mut [f64]>,
    ) -> Result<ElboTerms> {
        self.check(Some(x), c)?;
        if eps.len() != self.latent_dim {
            return Err(Error::config("noise vector has the wrong length"));
        }
        let z_dim = self.latent_dim;
        let mut enc_cache = ForwardCache::default();
        let h = self.encoder.forward_cached(&[x, c].concat(), &mut enc_cache)?;
        let mu_z = &h[..z_dim];
        let raw = &h[z_dim..];
        let log_sigma: Vec<f64> = raw.iter().map(|v| v.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)).collect();
        let sigma: Vec<f64> = log_sigma.iter().map(|l| l.exp()).collect();
        let z: Vec<f64> = mu_z.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect();

        let dec_in = [z.as_slice(), c].concat();
        let mut mean_cache = ForwardCache::default();
        let mut aux_cache = ForwardCache::default();
        let mu_x = self.decoder_mean.forward_cached(&dec_in, &mut mean_cache)?;
        let aux = self.decoder_aux.forward_cached(&dec_in, &mut aux_cache)?;
        let likelihood = LowRankGaussian::new(mu_x, self.basis.clone(), aux, self.jitter)?;
        let kl = kl_to_standard_normal(mu_z, &log_sigma);

        let Some(grads) = grads else {
            let reconstruction = likelihood.log_density(x)?;
            return Ok(ElboTerms {
                elbo: reconstruction - kl_weight * kl,
                reconstruction,
                kl,
            });
        };

        if grads.len() != self.num_params() {
            return Err(Error::config("gradient buffer has the wrong length"));
        }
        let dg = likelihood.log_density_grad(x)?;
        let [r_enc, r_mean, r_aux, r_dict] = self.ranges();
        let dz_mean = self.decoder_mean.backward(&mean_cache, &dg.mu, &mut grads[r_mean])?;
        let dz_aux = self.decoder_aux.backward(&aux_cache, &dg.aux_std, &mut grads[r_aux])?;
        if let Some(d) = &dg.dict {
            for (g, v) in grads[r_dict].iter_mut().zip(d.as_slice()) {
                *g += v;
            }
        }
        let mut upstream = vec![0.0; 2 * z_dim];
        for j in 0..z_dim {
            let dz = dz_mean[j] + dz_aux[j];
            upstream[j] = dz - kl_weight * mu_z[j];
            let inside = raw[j] > -LOG_SIGMA_BOUND && raw[j] < LOG_SIGMA_BOUND;
            upstream[z_dim + j] = if inside {
                dz * sigma[j] * eps[j] - kl_weight * (sigma[j] * sigma[j] - 1.0)
            } else {
                0.0
            };
        }
        self.encoder.backward(&enc_cache, &upstream, &mut grads[r_enc])?;
        Ok(ElboTerms {
            elbo: dg.log_density - kl_weight * kl,
            reconstruction: dg.log_density,
            kl,
        })
    }

    /// Single-sample ELBO and its gradient, drawing the noise from `rng`.
    pub fn elbo<R: Rng + ?Sized>(&self, x: &[f64], c: &[f64], rng: &mut R) -> Result<(ElboTerms, GradientTape)> {
        let eps: Vec<f64> = (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut tape = GradientTape::zeros(self.num_params());
        let terms = self.elbo_with_noise(x, c, &eps, 1.0, Some(tape.as_mut_slice()))?;
        Ok((terms, tape))
    }

    /// Importance weights `log p(x|z_s,c) + log p(z_s) - log q(z_s|x,c)` for
    /// `samples` draws `z_s ~ q(z | x, c)`.
    pub fn importance_log_weights<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        c: &[f64],
        samples: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if samples == 0 {
            return Err(Error::argument("importance sampling needs at least one sample"));
        }
        let (mu, log_sigma) = self.encode(x, c)?;
        let sigma: Vec<f64> = log_sigma.iter().map(|l| l.exp()).collect();
        let zeros = vec![0.0; self.latent_dim];
        let ones = vec![1.0; self.latent_dim];
        (0..samples)
            .map(|_| {
                let z: Vec<f64> = mu
                    .iter()
                    .zip(&sigma)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lik = self.decode(&z, c)?.log_density(x)?;
                Ok(lik + diag_normal_log_density(&z, &zeros, &ones) - diag_normal_log_density(&z, &mu, &sigma))
            })
            .collect()
    }

    /// `log p(x | c)` estimated by importance sampling through the encoder.
    pub fn importance_log_likelihood<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        c: &[f64],
        samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let w = self.importance_log_weights(x, c, samples, rng)?;
        Ok(log_sum_exp(&w) - (samples as f64).ln())
    }
}

impl Trainable for CvaeModel {
    fn num_params(&self) -> usize {
        CvaeModel::num_params(self)
    }

    fn param_groups_mut(&mut self) -> Vec<ParamGroup<'_>> {
        let basis = Arc::make_mut(&mut self.basis);
        vec![
            ParamGroup {
                name: "encoder",
                values: self.encoder.params_mut(),
            },
            ParamGroup {
                name: "decoder_mean",
                values: self.decoder_mean.params_mut(),
            },
            ParamGroup {
                name: "decoder_aux",
                values: self.decoder_aux.params_mut(),
            },
            ParamGroup {
                name: "dictionary",
                values: basis.learnable_mut(),
            },
        ]
    }
}

/// Mean per-example ELBO with entity context at its Dirichlet mean and the
/// reparameterization noise drawn from fixed streams of `seed`.
pub fn mean_elbo<D: ConditionedData>(model: &CvaeModel, data: &D, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let values: Vec<Result<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[domain::VALIDATION, i as u64]);
            let eps: Vec<f64> = (0..model.latent_dim).map(|_| r.sample(StandardNormal)).collect();
            let c = data.condition(i, ThetaDraw::Mean);
            Ok(model.elbo_with_noise(data.target(i), &c, &eps, 1.0, None)?.elbo)
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / data.len() as f64)
}

struct ElboObjective<'a, D, V> {
    data: &'a D,
    cfg: &'a TrainConfig,
    validator: V,
}

impl<D, V> Objective<CvaeModel> for ElboObjective<'_, D, V>
where
    D: ConditionedData,
    V: FnMut(&CvaeModel) -> Result<f64>,
{
    fn batch(&mut self, model: &CvaeModel, batch: &[usize], epoch: usize, _: usize) -> Result<(f64, Vec<f64>)> {
        let kl_weight = self.cfg.kl_weight(epoch - 1);
        let seed = self.cfg.seed;
        let data = self.data;
        let (total, mut grads) = batch_gradient(batch, model.num_params(), |i, g| {
            let mut r = rng::stream(seed, &[domain::TRAIN_NOISE, epoch as u64, i as u64]);
            let c = data.condition(i, ThetaDraw::Sample(&mut r));
            let eps: Vec<f64> = (0..model.latent_dim).map(|_| r.sample(StandardNormal)).collect();
            Ok(model.elbo_with_noise(data.target(i), &c, &eps, kl_weight, Some(g))?.elbo)
        })?;
        let n = batch.len() as f64;
        // ascend the ELBO: hand the optimizer the gradient of -ELBO
        grads.iter_mut().for_each(|g| *g = -*g / n);
        Ok((total / n, grads))
    }

    fn validate(&mut self, model: &CvaeModel) -> Result<f64> {
        (self.validator)(model)
    }
}

/// Train on `train`, early-stopping on the mean validation ELBO of `val`.
pub fn train<D: ConditionedData, E: ConditionedData>(
    model: &mut CvaeModel,
    train: &D,
    val: &E,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    if val.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let seed = cfg.seed;
    train_with_validator(model, train, cfg, |m| mean_elbo(m, val, seed))
}

/// Training with a caller-supplied validation metric (higher is better).
pub fn train_with_validator<D, V>(model: &mut CvaeModel, train: &D, cfg: &TrainConfig, validator: V) -> Result<TrainingLog>
where
    D: ConditionedData,
    V: FnMut(&CvaeModel) -> Result<f64>,
{
    let mut objective = ElboObjective {
        data: train,
        cfg,
        validator,
    };
    training::fit(model, train.len(), cfg, Direction::Maximize, "elbo", &mut objective)
}
