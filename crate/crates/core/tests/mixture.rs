//! Mixture forecasts against naive evaluation and brute-force scans.

use std::sync::Arc;

use loadcast::condition::Conditioner;
use loadcast::cvae::{CvaeModel, NetworkConfig};
use loadcast::data::{make_all_examples, synth, SynthConfig};
use loadcast::forecast::{best_trace, empirical_quantiles, sigma_fan, ForecastMixture, Provenance, DEFAULT_LEVELS};
use loadcast::lowrank::{LowRankGaussian, PatternBasis};
use loadcast::metrics::cvae_fans;
use loadcast::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn prov() -> Provenance {
    Provenance {
        entity_id: "u".into(),
        entity: 0,
        day: 0,
        date: "2022-01-01".into(),
        seed: 5,
    }
}

fn random_mixture(seed: u64, t: usize, v: usize, s: usize) -> ForecastMixture {
    let mut r = rng::stream(seed, &[t as u64, v as u64, s as u64]);
    let basis = Arc::new(PatternBasis::random(t, v, &mut r));
    let comps = (0..s)
        .map(|_| {
            let mu: Vec<f64> = (0..t).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
            let aux: Vec<f64> = (0..basis.aux_len()).map(|_| 0.2 + r.random::<f64>()).collect();
            LowRankGaussian::new(mu, basis.clone(), aux, 0.05).unwrap()
        })
        .collect();
    ForecastMixture::from_components(comps, prov()).unwrap()
}

#[test]
fn log_density_matches_naive_sum() {
    for seed in 0..200 {
        let m = random_mixture(seed, 1 + seed as usize % 5, seed as usize % 4, 1 + seed as usize % 9);
        let mut r = rng::stream(seed, &[77]);
        let x: Vec<f64> = (0..m.dim()).map(|_| r.sample(StandardNormal)).collect();
        let naive = m
            .components()
            .iter()
            .map(|c| c.log_density(&x).unwrap().exp())
            .sum::<f64>()
            / m.len() as f64;
        assert!(naive > 1e-300);
        assert!((m.log_density(&x).unwrap() - naive.ln()).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn hand_evaluated_two_component_case() {
    let b = Arc::new(PatternBasis::Diagonal(1));
    // variance = s^2 + xi = 1
    let c = |m: f64| LowRankGaussian::new(vec![m], b.clone(), vec![0.9f64.sqrt()], 0.1).unwrap();
    let m = ForecastMixture::from_components(vec![c(0.0), c(2.0)], prov()).unwrap();
    let ln_phi_1 = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((m.log_density(&[1.0]).unwrap() - ln_phi_1).abs() < 1e-12);
}

#[test]
fn two_level_sampling_picks_components_evenly() {
    let b = Arc::new(PatternBasis::Diagonal(1));
    let c = |m: f64| LowRankGaussian::new(vec![m], b.clone(), vec![1e-3], 1e-6).unwrap();
    let m = ForecastMixture::from_components(vec![c(-10.0), c(10.0)], prov()).unwrap();
    let n = 100_000;
    let e = m.sample_ensemble(n, &mut rng::stream(1, &[])).unwrap();
    let pos = e.samples.iter().filter(|x| x[0] > 0.0).count() as f64 / n as f64;
    assert!((pos - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{pos}");
}

#[test]
fn ensemble_mean_matches_mixture_mean() {
    let m = random_mixture(3, 3, 2, 6);
    let n = 100_000;
    let e = m.sample_ensemble(n, &mut rng::stream(2, &[])).unwrap();
    let target = m.mean();
    for t in 0..3 {
        let xs: Vec<f64> = e.samples.iter().map(|x| x[t]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - target[t]).abs() < 4.0 * (var / n as f64).sqrt(), "t={t}");
    }
}

#[test]
fn fans_from_the_mixture_cover_its_own_draws() {
    let m = random_mixture(4, 1, 0, 5);
    let levels = [0.1, 0.9];
    let trials = 10_000;
    let mut inside = 0;
    for i in 0..trials {
        let mut r = rng::stream(6, &[i]);
        let e = m.sample_ensemble(200, &mut r).unwrap();
        let fan = empirical_quantiles(&e.samples, &levels).unwrap();
        let truth = m.sample_ensemble(1, &mut r).unwrap().samples.remove(0);
        if fan.values[0][0] <= truth[0] && truth[0] <= fan.values[1][0] {
            inside += 1;
        }
    }
    let frac = inside as f64 / trials as f64;
    assert!((frac - 0.8).abs() < 0.02, "{frac}");
}

#[test]
fn best_trace_and_component_match_exhaustive_scans() {
    let mut r = rng::stream(8, &[]);
    for _ in 0..200 {
        let t = r.random_range(1..6);
        let rows: Vec<Vec<f64>> = (0..r.random_range(1..20))
            .map(|_| (0..t).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let truth: Vec<f64> = (0..t).map(|_| r.sample(StandardNormal)).collect();
        let d: Vec<f64> = rows
            .iter()
            .map(|x| x.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let want = d.iter().position(|v| *v == min).unwrap();
        assert_eq!(best_trace(&rows, &truth).unwrap().0, want);
    }
    for seed in 0..50 {
        let m = random_mixture(seed, 4, 2, 7);
        let x: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
        let lp: Vec<f64> = m.components().iter().map(|c| c.log_density_dense(&x).unwrap()).collect();
        let want = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
        assert_eq!(m.best_component(&x).unwrap().0, want);
    }
}

#[test]
fn sigma_fan_matches_dense_diagonal() {
    for seed in 0..20 {
        let m = random_mixture(seed, 5, 3, 1);
        let c = &m.components()[0];
        let cov = c.covariance();
        let alphas = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0];
        let fan = sigma_fan(c, &alphas);
        assert_eq!(fan[0], c.mu());
        for (row, a) in fan.iter().zip(alphas) {
            for t in 0..5 {
                assert!((row[t] - (c.mu()[t] + a * cov[(t, t)].sqrt())).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forecasts_never_read_the_target_day() {
    let (ds, _) = synth(&SynthConfig {
        entities: 3,
        days: 6,
        ..Default::default()
    })
    .unwrap();
    let examples = make_all_examples(&ds, 1);
    let ids: Vec<String> = ds.entities.iter().map(|e| e.id.clone()).collect();
    let cond = Conditioner::new(&ids, None, 24).unwrap();
    let net = NetworkConfig {
        hidden: vec![8],
        latent_dim: 2,
        dict_size: 3,
        jitter: 1e-2,
    };
    let model = CvaeModel::new(24, cond.cond_dim(), &net, 0).unwrap();
    let a = cvae_fans(&model, &cond, &examples, &DEFAULT_LEVELS, 20, 1).unwrap();
    let mut poisoned = examples.clone();
    for ex in &mut poisoned {
        ex.target.iter_mut().for_each(|v| *v = 1e6);
    }
    let b = cvae_fans(&model, &cond, &poisoned, &DEFAULT_LEVELS, 20, 1).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_density_bounds(seed in any::<u64>(), t in 1usize..5, v in 0usize..4, s in 1usize..8) {
        let m = random_mixture(seed, t, v, s);
        let mut r = rng::stream(seed, &[1]);
        let x: Vec<f64> = (0..t).map(|_| 3.0 * r.sample::<f64, _>(StandardNormal)).collect();
        let lp = m.component_log_densities(&x).unwrap();
        let mix = m.log_density(&x).unwrap();
        let lo = lp.iter().copied().fold(f64::INFINITY, f64::min) - (s as f64).ln();
        let hi = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mix >= lo - 1e-12 && mix <= hi + 1e-12);
    }

    #[test]
    fn record_round_trip_preserves_density(seed in any::<u64>()) {
        let m = random_mixture(seed, 3, 2, 4);
        let json = serde_json::to_string(&m.to_record()).unwrap();
        let back = ForecastMixture::from_record(serde_json::from_str(&json).unwrap()).unwrap();
        prop_assert_eq!(back.log_density(&[0.1, 0.2, 0.3]).unwrap(), m.log_density(&[0.1, 0.2, 0.3]).unwrap());
    }
}
