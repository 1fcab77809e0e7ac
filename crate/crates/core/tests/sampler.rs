//! Sampler contracts: determinism, positive-definite covariance draws,
//! covariate-standardization invariance, and the adaptive MH and Gibbs
//! building blocks against known targets.

mod common;

use bounded_jm::basis::difference_penalty;
use bounded_jm::mcmc::{gibbs_tau, mcse, mh_update, rhat, rm_adapt, run_chains, summarize_values, ChainConfig};
use bounded_jm::model::Model;
use bounded_jm::simulate::{generate, Scenario, ScenarioConfig, Variant};
use bounded_jm::spec::GammaPrior;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn scenario_model(scenario: Scenario, n: usize, seed: u64) -> Model {
    let sc = ScenarioConfig { seed, ..ScenarioConfig::new(scenario, n) };
    let data = generate(&sc).unwrap();
    Model::from_data(&data.longitudinal, &data.survival, &sc.fit_spec(Variant::Beta).unwrap()).unwrap()
}

#[test]
fn same_seed_gives_identical_draws_for_any_worker_count() {
    let model = scenario_model(Scenario::A, 25, 8);
    let cfg = ChainConfig { chains: 2, iterations: 200, warmup: 100, seed: 42, workers: 1, ..Default::default() };
    let a = run_chains(&model, &cfg).unwrap();
    let b = run_chains(&model, &cfg).unwrap();
    assert_eq!(a, b);
    let c = run_chains(&model, &ChainConfig { workers: 2, ..cfg.clone() }).unwrap();
    assert_eq!(a, c);
    let d = run_chains(&model, &ChainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.chains[0].values, d.chains[0].values);
}

#[test]
fn covariance_draws_are_positive_definite() {
    let model = scenario_model(Scenario::A, 40, 9);
    let cfg = ChainConfig { chains: 1, iterations: 600, warmup: 300, seed: 1, ..Default::default() };
    let draws = run_chains(&model, &cfg).unwrap();
    let k = model.n_re;
    let cols: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|a| (0..=a).map(move |b| (a, b)))
        .map(|(a, b)| (a, b, draws.index(&format!("D[{},{}]", model.re_names[a], model.re_names[b])).unwrap()))
        .collect();
    for v in &draws.chains[0].values {
        let mut d = DMatrix::zeros(k, k);
        for &(a, b, p) in &cols {
            d[(a, b)] = v[p];
            d[(b, a)] = v[p];
        }
        assert!(d.cholesky().is_some());
    }
}

/// Fits with and without internal covariate standardization target the same
/// posterior on the original scale.
#[test]
fn standardization_does_not_change_the_posterior() {
    let sc = ScenarioConfig { seed: 12, ..ScenarioConfig::new(Scenario::B, 120) };
    let data = generate(&sc).unwrap();
    let mut spec = sc.fit_spec(Variant::Beta).unwrap();
    let cfg = ChainConfig { chains: 3, iterations: 4_000, warmup: 1_000, seed: 2, ..Default::default() };
    let on = run_chains(&Model::from_data(&data.longitudinal, &data.survival, &spec).unwrap(), &cfg).unwrap();
    spec.standardize = false;
    let off = run_chains(&Model::from_data(&data.longitudinal, &data.survival, &spec).unwrap(), &cfg).unwrap();
    for name in ["gamma_CR1[group]", "alpha_CR1[y1.expit(value)]", "beta_y1[intercept]", "beta_y1[time]"] {
        let a = on.column(on.index(name).unwrap());
        let b = off.column(off.index(name).unwrap());
        let mean = |c: &[Vec<f64>]| c.concat().iter().sum::<f64>() / c.concat().len() as f64;
        let se = (common::pooled_mcse(&a).powi(2) + common::pooled_mcse(&b).powi(2)).sqrt();
        let (ma, mb) = (mean(&a), mean(&b));
        assert!((ma - mb).abs() <= 3.0 * se, "{name}: {ma} vs {mb} (3 MCSE {})", 3.0 * se);
    }
}

/// Adaptive random-walk MH on a standard normal: the sample mean is within
/// 3 MCSE of zero and the tuned acceptance is within 0.05 of the target.
#[test]
fn adaptive_mh_on_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let target = 0.44;
    let chol = DMatrix::identity(1, 1);
    let logp = |x: &[f64]| -0.5 * x[0] * x[0];
    let (mut x, mut lp, mut scale) = (vec![3.0], -4.5, 1.0);
    let warmup = 5_000;
    for i in 1..=warmup {
        let r = mh_update(&x, lp, logp, &chol, scale, &mut rng);
        scale = rm_adapt(scale, r.accepted, i, target);
        x = r.x;
        lp = r.logp;
    }
    let n = 50_000;
    let mut draws = Vec::with_capacity(n);
    let mut accepted = 0;
    for _ in 0..n {
        let r = mh_update(&x, lp, logp, &chol, scale, &mut rng);
        accepted += r.accepted as usize;
        x = r.x;
        lp = r.logp;
        draws.push(x[0]);
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!(mean.abs() <= 3.0 * mcse(&draws), "mean {mean}");
    let rate = accepted as f64 / n as f64;
    assert!((rate - target).abs() <= 0.05, "acceptance {rate}");
}

#[test]
fn rm_adapt_direction() {
    assert!(rm_adapt(1.0, false, 10, 0.44) < 1.0);
    assert!(rm_adapt(1.0, true, 10, 0.44) > 1.0);
    assert!(rm_adapt(1e-300, false, 1, 0.44) > 0.0);
}

#[test]
fn tau_gibbs_moments_and_ordering() {
    let pen = difference_penalty(10, 2, 1e-6).unwrap();
    let prior = GammaPrior { shape: 1.0, rate: 0.005 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let small: Vec<f64> = (0..10).map(|k| 0.1 * (k as f64 * 0.7).sin()).collect();
    let large: Vec<f64> = small.iter().map(|g| 10.0 * g).collect();
    let draws = |g: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> { (0..20_000).map(|_| gibbs_tau(g, &pen, prior, rng)).collect() };
    let a = draws(&small, &mut rng);
    let b = draws(&large, &mut rng);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (shape, rate) = (prior.shape + 5.0, prior.rate + 0.5 * pen.quad_form(&small));
    let sd = (shape / (rate * rate)).sqrt() / (a.len() as f64).sqrt();
    assert!((mean(&a) - shape / rate).abs() <= 3.0 * sd);
    assert!(mean(&b) < mean(&a));
}

#[test]
fn rhat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |shift: f64| -> Vec<f64> { (0..1000).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect() };
    let same = [draw(0.0), draw(0.0), draw(0.0)];
    let refs: Vec<&[f64]> = same.iter().map(|c| c.as_slice()).collect();
    assert!(rhat(&refs).unwrap() < 1.05);
    let apart = [draw(0.0), draw(10.0)];
    let refs: Vec<&[f64]> = apart.iter().map(|c| c.as_slice()).collect();
    assert!(rhat(&refs).unwrap() > 1.10);
    assert!((rhat(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]).unwrap() - 0.8165).abs() < 1e-4);
}

#[test]
fn summary_of_exponentiated_normal_has_mean_above_median() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws: Vec<f64> = (0..5000).map(|_| (0.8 * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let s = summarize_values("HR", &draws).unwrap();
    assert!(s.mean > s.median);
}

#[test]
fn factorization_holds_for_every_block() {
    let c = common::factorization(200);
    assert!(c.pass, "{}", c.detail);
}
