//! Analytic gradients against central finite differences.

use loadcast::cvae::{CvaeModel, NetworkConfig};
use loadcast::lowrank::{LowRankGaussian, PatternBasis};
use loadcast::nn::{Activation, DenseNet, ForwardCache};
use loadcast::qrnn::QrnnModel;
use loadcast::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap for tiny vectors.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn dense_net_all_activations() {
    for seed in 0..10 {
        for act in [Activation::Tanh, Activation::Softplus, Activation::Relu] {
            let mut r = rng::stream(seed, &[1]);
            let net = DenseNet::mlp(5, &[7, 6], 3, act, Activation::Softplus, &mut r).unwrap();
            let x = normals(&mut r, 5);
            let up = normals(&mut r, 3);
            let mut cache = ForwardCache::default();
            net.forward_cached(&x, &mut cache).unwrap();
            let mut g = vec![0.0; net.num_params()];
            let gx = net.backward(&cache, &up, &mut g).unwrap();
            let objective = |n: &DenseNet, x: &[f64]| -> f64 {
                n.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let fd = central_difference(net.params(), |p| {
                let n = DenseNet::from_parts(net.layers().to_vec(), p.to_vec()).unwrap();
                objective(&n, &x)
            });
            assert!(rel_err(&g, &fd) < TOL, "seed {seed} {act:?} params {}", rel_err(&g, &fd));
            let fdx = central_difference(&x, |xx| objective(&net, xx));
            assert!(rel_err(&gx, &fdx) < TOL, "seed {seed} {act:?} input");
        }
    }
}

#[test]
fn low_rank_density_gradients_every_path() {
    for seed in 0..10 {
        for (t, v) in [(4, 3), (4, 4), (4, 6), (5, 0)] {
            let mut r = rng::stream(seed, &[2, v as u64]);
            let basis = PatternBasis::random(t, v, &mut r);
            let aux_len = basis.aux_len();
            let basis = Arc::new(basis);
            let mu = normals(&mut r, t);
            let s: Vec<f64> = (0..aux_len).map(|_| 0.3 + r.random::<f64>()).collect();
            let x: Vec<f64> = normals(&mut r, t);
            let g = LowRankGaussian::new(mu.clone(), basis.clone(), s.clone(), 0.05)
                .unwrap()
                .log_density_grad(&x)
                .unwrap();
            let f_mu = central_difference(&mu, |m| {
                LowRankGaussian::new(m.to_vec(), basis.clone(), s.clone(), 0.05).unwrap().log_density(&x).unwrap()
            });
            assert!(rel_err(&g.mu, &f_mu) < TOL, "mu T={t} V={v}");
            let f_s = central_difference(&s, |ss| {
                LowRankGaussian::new(mu.clone(), basis.clone(), ss.to_vec(), 0.05).unwrap().log_density(&x).unwrap()
            });
            assert!(rel_err(&g.aux_std, &f_s) < TOL, "aux T={t} V={v}");
            if let PatternBasis::Dictionary(u) = &*basis {
                let f_u = central_difference(u.as_slice(), |uu| {
                    let b = Arc::new(PatternBasis::Dictionary(nalgebra::DMatrix::from_column_slice(t, v, uu)));
                    LowRankGaussian::new(mu.clone(), b, s.clone(), 0.05).unwrap().log_density(&x).unwrap()
                });
                assert!(rel_err(g.dict.as_ref().unwrap().as_slice(), &f_u) < TOL, "dict T={t} V={v}");
            } else {
                assert!(g.dict.is_none());
            }
        }
    }
}

/// Fresh models have zero biases, so a hidden unit fed by an all-dead layer
/// sits exactly on the ReLU kink; jitter every parameter to move off it.
fn jittered(model: CvaeModel, seed: u64) -> CvaeModel {
    let mut r = rng::stream(seed, &[99]);
    let p: Vec<f64> = model.flat_params().iter().map(|v| v + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
    let mut m = model;
    m.set_flat_params(&p).unwrap();
    m
}

fn class_of(path: &str) -> &'static str {
    ["encoder", "decoder_mean", "decoder_aux", "dictionary"]
        .into_iter()
        .find(|c| path.starts_with(c))
        .unwrap()
}

#[test]
fn elbo_every_parameter_class() {
    // T = 4, Z = 2, V = 3, C = 5
    for seed in 0..10 {
        let cfg = NetworkConfig {
            hidden: vec![6],
            latent_dim: 2,
            dict_size: 3,
            jitter: 0.05,
        };
        let model = jittered(CvaeModel::new(4, 5, &cfg, seed).unwrap(), seed);
        let mut r = rng::stream(seed, &[3]);
        let x = normals(&mut r, 4);
        let c = normals(&mut r, 5);
        let eps = normals(&mut r, 2);
        let mut g = vec![0.0; model.num_params()];
        model.elbo_with_noise(&x, &c, &eps, 1.0, Some(&mut g)).unwrap();
        let fd = central_difference(&model.flat_params(), |p| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            m.elbo_with_noise(&x, &c, &eps, 1.0, None).unwrap().elbo
        });
        let mut seen = Vec::new();
        for class in ["encoder", "decoder_mean", "decoder_aux", "dictionary"] {
            let idx: Vec<usize> = (0..g.len()).filter(|&i| class_of(&model.param_path(i)) == class).collect();
            assert!(!idx.is_empty(), "{class} has no parameters");
            let a: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            let b: Vec<f64> = idx.iter().map(|&i| fd[i]).collect();
            let e = rel_err(&a, &b);
            assert!(e < TOL, "seed {seed} {class}: {e}");
            seen.push(class);
        }
        assert_eq!(seen.len(), 4);
    }
}

#[test]
fn elbo_gradient_with_diagonal_head_and_kl_weight() {
    for seed in 0..10 {
        let cfg = NetworkConfig {
            hidden: vec![5, 4],
            latent_dim: 2,
            dict_size: 0,
            jitter: 0.05,
        };
        let model = jittered(CvaeModel::new(4, 3, &cfg, seed).unwrap(), seed);
        let mut r = rng::stream(seed, &[4]);
        let (x, c, eps) = (normals(&mut r, 4), normals(&mut r, 3), normals(&mut r, 2));
        let mut g = vec![0.0; model.num_params()];
        model.elbo_with_noise(&x, &c, &eps, 0.3, Some(&mut g)).unwrap();
        let fd = central_difference(&model.flat_params(), |p| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            m.elbo_with_noise(&x, &c, &eps, 0.3, None).unwrap().elbo
        });
        assert!(rel_err(&g, &fd) < TOL, "seed {seed}: {}", rel_err(&g, &fd));
    }
}

#[test]
fn quantile_heads() {
    // T = 4, Q = 3
    for seed in 0..10 {
        let model = QrnnModel::new(4, 5, &[6], &[0.1, 0.5, 0.9], seed).unwrap();
        let mut r = rng::stream(seed, &[5]);
        let (x, c) = (normals(&mut r, 4), normals(&mut r, 5));
        let mut g = vec![0.0; model.num_params()];
        model.loss_and_grad(&x, &c, &mut g).unwrap();
        let fd = central_difference(model.net().params(), |p| {
            let net = DenseNet::from_parts(model.net().layers().to_vec(), p.to_vec()).unwrap();
            let m = QrnnModel::from_net(4, &[0.1, 0.5, 0.9], net).unwrap();
            let fan = m.predict(&c).unwrap();
            loadcast::qrnn::pinball_loss(m.levels(), &fan.values, &x)
        });
        assert!(rel_err(&g, &fd) < TOL, "seed {seed}: {}", rel_err(&g, &fd));
    }
}

