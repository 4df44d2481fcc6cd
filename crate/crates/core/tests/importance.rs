//! Importance-sampled log-likelihood against closed-form marginals.

use loadcast::condition::PairSet;
use loadcast::cvae::{log_sum_exp, mean_elbo, CvaeModel};
use loadcast::lowrank::PatternBasis;
use loadcast::metrics::average_log_likelihood;
use loadcast::nn::{Activation, DenseNet, LayerShape};
use loadcast::rng::{self, domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

const T: usize = 3;
const Z: usize = 2;
const C: usize = 1;
const JITTER: f64 = 0.05;

fn affine(input: usize, output: usize, act: Activation, w: &DMatrix<f64>, b: &[f64]) -> DenseNet {
    let mut p = Vec::with_capacity(output * (input + 1));
    for i in 0..output {
        for j in 0..input {
            p.push(if j < w.ncols() { w[(i, j)] } else { 0.0 });
        }
    }
    p.extend_from_slice(b);
    DenseNet::from_parts(
        vec![LayerShape {
            input,
            output,
            activation: act,
        }],
        p,
    )
    .unwrap()
}

fn inverse_softplus(s: f64) -> f64 {
    s.exp_m1().ln()
}

/// Linear-Gaussian model `x = W z + b + noise`, noise `N(0, U diag(s)^2 U^T
/// + xi I)`, with an affine encoder built from the exact posterior (mean
/// shrunk and spread inflated by the given factors).
struct Toy {
    w: DMatrix<f64>,
    b: Vec<f64>,
    noise: DMatrix<f64>,
    model: CvaeModel,
}

fn toy(shrink: f64, inflate: f64) -> Toy {
    let w = DMatrix::from_row_slice(T, Z, &[1.0, 0.3, -0.5, 0.8, 0.2, -1.1]);
    let b = vec![0.5, -0.2, 1.0];
    let u = DMatrix::from_row_slice(T, 2, &[0.6, 0.1, 0.4, -0.5, -0.2, 0.7]);
    let s = [0.5, 0.8];
    let noise = &u * DMatrix::from_diagonal(&DVector::from_iterator(2, s.iter().map(|v| v * v))) * u.transpose()
        + DMatrix::identity(T, T) * JITTER;
    let ni = noise.clone().try_inverse().unwrap();
    let post_cov = (DMatrix::identity(Z, Z) + w.transpose() * &ni * &w).try_inverse().unwrap();
    let m = &post_cov * w.transpose() * &ni * shrink;
    let mb = &m * DVector::from_column_slice(&b);
    let mut enc_b: Vec<f64> = mb.iter().map(|v| -v).collect();
    enc_b.extend((0..Z).map(|k| (inflate * post_cov[(k, k)].sqrt()).ln()));
    let mut enc_w = DMatrix::zeros(2 * Z, T);
    enc_w.view_mut((0, 0), (Z, T)).copy_from(&m);
    let encoder = affine(T + C, 2 * Z, Activation::Identity, &enc_w, &enc_b);
    let decoder_mean = affine(Z + C, T, Activation::Identity, &w, &b);
    let aux_b: Vec<f64> = s.iter().map(|v| inverse_softplus(*v)).collect();
    let decoder_aux = affine(Z + C, 2, Activation::Softplus, &DMatrix::zeros(2, 0), &aux_b);
    let model = CvaeModel::from_parts(encoder, decoder_mean, decoder_aux, PatternBasis::Dictionary(u), JITTER).unwrap();
    Toy { w, b, noise, model }
}

impl Toy {
    fn marginal_cov(&self) -> DMatrix<f64> {
        &self.w * self.w.transpose() + &self.noise
    }

    fn log_marginal(&self, x: &[f64]) -> f64 {
        let cov = self.marginal_cov();
        let chol = cov.clone().cholesky().unwrap();
        let d = DVector::from_column_slice(x) - DVector::from_column_slice(&self.b);
        let quad = d.dot(&chol.solve(&d));
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (T as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
    }

    fn data(&self, n: usize, seed: u64) -> PairSet {
        let l = self.marginal_cov().cholesky().unwrap().l();
        let mut r = rng::stream(seed, &[]);
        let pairs = (0..n)
            .map(|_| {
                let e = DVector::from_iterator(T, (0..T).map(|_| r.sample::<f64, _>(StandardNormal)));
                let x = &l * e + DVector::from_column_slice(&self.b);
                (x.as_slice().to_vec(), vec![0.0; C])
            })
            .collect();
        PairSet { pairs }
    }
}

#[test]
fn linear_gaussian_within_three_standard_errors() {
    let toy = toy(0.9, 1.3);
    let data = toy.data(200, 1);
    let s_is = 1000;
    let seed = 4;
    let all = average_log_likelihood(&toy.model, &data, s_is, seed).unwrap();
    let n = data.pairs.len() as f64;
    let mut exact = 0.0;
    let mut var = 0.0;
    let mut again = 0.0;
    for (i, (x, c)) in data.pairs.iter().enumerate() {
        exact += toy.log_marginal(x) / n;
        let mut r = rng::stream(seed, &[domain::IMPORTANCE, i as u64]);
        let lw = toy.model.importance_log_weights(x, c, s_is, &mut r).unwrap();
        again += (log_sum_exp(&lw) - (s_is as f64).ln()) / n;
        // delta method: sd(log mean w) ~ sd(w) / (sqrt(S) mean(w))
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
        let mean = w.iter().sum::<f64>() / s_is as f64;
        let v = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s_is - 1) as f64;
        var += v / (s_is as f64 * mean * mean) / (n * n);
    }
    let se = var.sqrt();
    assert!((again - all).abs() < 1e-12);
    assert!(se > 0.0);
    assert!((all - exact).abs() < 3.0 * se, "ALL {all} vs exact {exact}, se {se}");
}

#[test]
fn elbo_below_importance_estimate() {
    let toy = toy(0.7, 1.6);
    let data = toy.data(400, 2);
    let all = average_log_likelihood(&toy.model, &data, 200, 5).unwrap();
    let elbos: Vec<f64> = (0..20).map(|s| mean_elbo(&toy.model, &data, s).unwrap()).collect();
    let m = elbos.iter().sum::<f64>() / elbos.len() as f64;
    let sd = (elbos.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (elbos.len() - 1) as f64).sqrt();
    assert!(m < all + 3.0 * sd / (elbos.len() as f64).sqrt(), "ELBO {m} vs ALL {all}");
}

#[test]
fn more_samples_never_hurt_on_average() {
    let toy = toy(0.6, 2.0);
    let x = toy.data(1, 3).pairs[0].0.clone();
    let c = vec![0.0; C];
    let est = |s_is: usize| -> Vec<f64> {
        (0..50u64)
            .map(|seed| {
                let mut r = rng::stream(seed, &[s_is as u64]);
                toy.model.importance_log_likelihood(&x, &c, s_is, &mut r).unwrap()
            })
            .collect()
    };
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, (var / v.len() as f64).sqrt())
    };
    let (m1, se1) = stats(&est(1));
    let (m100, se100) = stats(&est(100));
    assert!(m100 >= m1 - 3.0 * (se1 * se1 + se100 * se100).sqrt(), "{m100} vs {m1}");
}

#[test]
fn constant_decoder_with_prior_encoder_is_exact() {
    let u = DMatrix::from_row_slice(T, 2, &[0.6, 0.1, 0.4, -0.5, -0.2, 0.7]);
    let encoder = affine(T + C, 2 * Z, Activation::Identity, &DMatrix::zeros(2 * Z, 0), &[0.0; 2 * Z]);
    let mean_b = [0.3, -0.1, 0.8];
    let decoder_mean = affine(Z + C, T, Activation::Identity, &DMatrix::zeros(T, 0), &mean_b);
    let aux_b = [inverse_softplus(0.4), inverse_softplus(0.9)];
    let decoder_aux = affine(Z + C, 2, Activation::Softplus, &DMatrix::zeros(2, 0), &aux_b);
    let model = CvaeModel::from_parts(encoder, decoder_mean, decoder_aux, PatternBasis::Dictionary(u), JITTER).unwrap();
    let x = [1.0, -0.4, 0.2];
    let c = [0.7];
    let exact = model.decode(&[0.0; Z], &c).unwrap().log_density(&x).unwrap();
    for seed in 0..10 {
        for s_is in [1, 7, 100] {
            let mut r = rng::stream(seed, &[]);
            let est = model.importance_log_likelihood(&x, &c, s_is, &mut r).unwrap();
            assert!((est - exact).abs() < 1e-12, "seed {seed} S {s_is}: {est} vs {exact}");
        }
    }
    let one = PairSet {
        pairs: vec![(x.to_vec(), c.to_vec())],
    };
    let all = average_log_likelihood(&model, &one, 50, 3).unwrap();
    assert!((all - exact).abs() < 1e-12);
}
