//! Oracle checks shared by the integration tests. Each returns a [`Check`]
//! so the acceptance run can print one line per criterion.

#![allow(dead_code)]

use bounded_jm::basis::difference_operator;
use bounded_jm::data::{LongitudinalDataset, SurvivalDataset};
use bounded_jm::mcmc::init::initial_state;
use bounded_jm::mcmc::{mcse, rhat, run_chains, Block, ChainConfig, ParameterState, PosteriorDraws, Stage};
use bounded_jm::model::{Model, Workspace};
use bounded_jm::simulate::{generate, Scenario, ScenarioConfig, Variant};
use bounded_jm::spec::{Family, GammaPrior, HazardConfig, ModelSpec, NormalPrior, OutcomeSpec, Term};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

/// Combines sub-checks into one line; lists the failing parts.
pub fn combine(name: &str, parts: &[Check]) -> Check {
    let failed: Vec<String> = parts.iter().filter(|c| !c.pass).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    let detail = if failed.is_empty() {
        parts.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ")
    } else {
        failed.join("; ")
    };
    Check::new(name, failed.is_empty(), detail)
}

/// Written to stderr directly so the line shows even when the harness
/// captures test output.
pub fn report(criterion: usize, c: &Check) {
    use std::io::Write;
    let line = format!("criterion {criterion} {}: {} | {}\n", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

/// Pooled MCSE of the mean of several independent chains.
pub fn pooled_mcse(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    chains.iter().map(|c| mcse(c).powi(2)).sum::<f64>().sqrt() / m
}

/// Mean, variance and their MCSEs from per-chain draws.
pub struct Moments {
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_se: f64,
}

pub fn moments(chains: &[Vec<f64>]) -> Moments {
    let all: Vec<f64> = chains.concat();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let sq: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|v| (v - mean).powi(2)).collect()).collect();
    let var = sq.concat().iter().sum::<f64>() / all.len() as f64;
    Moments { mean, mean_se: pooled_mcse(chains), var, var_se: pooled_mcse(&sq) }
}

fn intercept_outcome(name: &str, family: Family, random: Vec<Term>) -> OutcomeSpec {
    OutcomeSpec { name: name.into(), family, link: None, fixed: vec![Term::Intercept, Term::Time], random, bounds: None }
}

/// Normal likelihood with known σ = 1, four observations with mean 1, and a
/// N(0, 1) prior: the posterior is N(0.8, 0.2).
pub fn conjugate_normal() -> Check {
    let long = LongitudinalDataset::read_csv("id,time,y\na,0,0\nb,0,0\nc,0,2\nd,0,2\n".as_bytes()).unwrap();
    let surv = SurvivalDataset::read_csv(
        "id,tstart,tstop,status,strata\na,0,1,0,CR1\nb,0,1,0,CR1\nc,0,1,0,CR1\nd,0,1,0,CR1\n".as_bytes(),
    )
    .unwrap();
    let mut y = intercept_outcome("y", Family::Gaussian, vec![]);
    y.fixed = vec![Term::Intercept];
    let mut spec = ModelSpec {
        outcomes: vec![y],
        // a survival record is required per subject; the hazard has no
        // association and its stage is not run
        hazards: vec![HazardConfig { stratum: "CR1".into(), covariates: vec![], forms: vec![], frailty: false }],
        timescale: Default::default(),
        spline: Default::default(),
        priors: Default::default(),
        standardize: true,
    };
    spec.priors.beta = NormalPrior { mean: 0.0, var: 1.0 };
    let model = Model::from_data(&long, &surv, &spec).unwrap();
    // σ starts at the residual sd of the pooled fit, which is exactly 1 here,
    // and stays fixed because the dispersion stage is left out
    let cfg = ChainConfig {
        chains: 4,
        iterations: 30_000,
        warmup: 2_000,
        seed: 11,
        block_order: vec![Stage::Beta],
        jitter: 0.0,
        ..Default::default()
    };
    let draws = run_chains(&model, &cfg).unwrap();
    let sigma = draws.pooled(draws.index("sigma_y").unwrap())[0];
    let m = moments(&draws.column(draws.index("beta_y[intercept]").unwrap()));
    let sd = m.var.sqrt();
    let sd_se = m.var_se / (2.0 * sd);
    let (want_mean, want_sd) = (0.8, 0.2f64.sqrt());
    let pass = (sigma - 1.0).abs() < 1e-6
        && (m.mean - want_mean).abs() <= 3.0 * m.mean_se
        && (sd - want_sd).abs() <= 3.0 * sd_se;
    Check::new(
        "conjugate normal-normal",
        pass,
        format!(
            "mean {:.4} (want 0.8, 3 MCSE {:.4}), sd {:.4} (want {:.4}, 3 MCSE {:.4})",
            m.mean,
            3.0 * m.mean_se,
            sd,
            want_sd,
            3.0 * sd_se
        ),
    )
}

/// A model with every parameter class: beta and Gaussian markers with
/// random intercepts and slopes, recurrent process and two causes with a
/// shared frailty, one covariate.
pub fn full_spec() -> ModelSpec {
    let mut spec = ScenarioConfig::new(Scenario::A, 10).fit_spec(Variant::Beta).unwrap();
    spec.outcomes[1].random = vec![Term::Intercept, Term::Time];
    spec
}

/// Prior moments of each named parameter of [`full_spec`] under the priors
/// used by [`prior_recovery`]. `None` when only the mean is checked.
fn prior_moments(name: &str, spec: &ModelSpec, q: usize, m_inv: &DMatrix<f64>) -> (f64, Option<f64>) {
    let p = &spec.priors;
    let gamma = |g: GammaPrior| (g.shape / g.rate, Some(g.shape / (g.rate * g.rate)));
    let k = 4.0;
    // marginal correlation under LKJ(η) in dimension k is 2·Beta(a, a) − 1
    let a = p.lkj_eta - 1.0 + k / 2.0;
    let corr_var = 1.0 / (2.0 * a + 1.0);
    let sd = p.re_sd;
    let sd2 = sd.shape * (sd.shape + 1.0) / (sd.rate * sd.rate);
    let sd4 = sd.shape * (sd.shape + 1.0) * (sd.shape + 2.0) * (sd.shape + 3.0) / sd.rate.powi(4);
    if name.starts_with("beta_") {
        (p.beta.mean, Some(p.beta.var))
    } else if name.starts_with("phi_") {
        gamma(p.phi)
    } else if name.starts_with("sigma_frailty") {
        gamma(p.sigma_frailty)
    } else if name.starts_with("sigma_") {
        gamma(p.sigma_y)
    } else if name.starts_with("D[") {
        let inner = &name[2..name.len() - 1];
        let (a, b) = inner.split_once(',').unwrap();
        if a == b {
            (sd2, Some(sd4 - sd2 * sd2))
        } else {
            (0.0, Some(corr_var * sd2 * sd2))
        }
    } else if name.starts_with("gamma0_") {
        let idx: usize = name[name.find('[').unwrap() + 1..name.len() - 1].parse().unwrap();
        assert!(idx <= q);
        // E[1/τ] for τ ~ Gamma(k, λ) is λ / (k − 1)
        let inv_tau = p.tau.rate / (p.tau.shape - 1.0);
        (0.0, Some(inv_tau * m_inv[(idx - 1, idx - 1)]))
    } else if name.starts_with("tau_") {
        gamma(p.tau)
    } else if name.starts_with("alpha_frailty") {
        (p.alpha_frailty.mean, Some(p.alpha_frailty.var))
    } else if name.starts_with("alpha_") {
        (p.alpha.mean, Some(p.alpha.var))
    } else if name.starts_with("gamma_") {
        (p.gamma.mean, Some(p.gamma.var))
    } else {
        panic!("no prior moments for {name}")
    }
}

/// With no data the posterior is the prior: every parameter's mean and
/// variance must match the prior's within 3 MCSE.
pub fn prior_recovery() -> (Check, Vec<String>) {
    let mut spec = full_spec();
    spec.priors.tau = GammaPrior { shape: 5.0, rate: 5.0 };
    spec.priors.phi = GammaPrior { shape: 2.0, rate: 0.5 };
    // a unit ridge keeps the spline prior proper and well conditioned
    spec.spline.ridge = 1.0;
    let long = LongitudinalDataset::read_csv("id,time,y1,y2\n".as_bytes()).unwrap();
    let surv = SurvivalDataset::read_csv("id,tstart,tstop,status,strata,group\n".as_bytes()).unwrap();
    let model = Model::from_data(&long, &surv, &spec).unwrap();
    let cfg = ChainConfig { chains: 4, iterations: 25_000, warmup: 5_000, seed: 5, ..Default::default() };
    let draws = run_chains(&model, &cfg).unwrap();
    let q = spec.spline.q;
    let dmat = difference_operator(q, spec.spline.order);
    let m = dmat.transpose() * &dmat + DMatrix::identity(q, q) * spec.spline.ridge;
    let m_inv = m.try_inverse().unwrap();
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (p, name) in draws.names.iter().enumerate() {
        let (mean, var) = prior_moments(name, &spec, q, &m_inv);
        let mo = moments(&draws.column(p));
        let mut ok = (mo.mean - mean).abs() <= 3.0 * mo.mean_se;
        if let Some(v) = var {
            ok &= (mo.var - v).abs() <= 3.0 * mo.var_se;
        }
        let line = format!(
            "{name}: mean {:.4} vs {mean:.4} (±{:.4}), var {:.4} vs {:.4} (±{:.4}) {}",
            mo.mean,
            3.0 * mo.mean_se,
            mo.var,
            var.unwrap_or(f64::NAN),
            3.0 * mo.var_se,
            if ok { "ok" } else { "MISS" }
        );
        if !ok {
            failed.push(name.clone());
        }
        lines.push(line);
    }
    let detail = if failed.is_empty() {
        format!("{} parameters", draws.names.len())
    } else {
        format!("outside 3 MCSE: {}", failed.join(", "))
    };
    (Check::new("prior recovery on empty data", failed.is_empty(), detail), lines)
}

/// Post-warmup acceptance of every adapted block of a Scenario-A fit.
pub fn acceptance_calibration() -> (Check, PosteriorDraws) {
    let sc = ScenarioConfig { seed: 21, ..ScenarioConfig::new(Scenario::A, 150) };
    let data = generate(&sc).unwrap();
    let model = Model::from_data(&data.longitudinal, &data.survival, &sc.fit_spec(Variant::Beta).unwrap()).unwrap();
    let cfg = ChainConfig { chains: 1, iterations: 2_000, warmup: 1_000, seed: 3, ..Default::default() };
    let draws = run_chains(&model, &cfg).unwrap();
    let stats = &draws.chains[0].acceptance;
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    for (block, s) in stats {
        let dev = (s.rate() - s.target).abs();
        worst = worst.max(dev);
        if dev > 0.07 {
            bad.push(format!("{block} {:.3} (target {})", s.rate(), s.target));
        }
    }
    let detail = if bad.is_empty() {
        format!("{} blocks, largest deviation {worst:.3}", stats.len())
    } else {
        bad.join(", ")
    };
    (Check::new("acceptance within target ± 0.07", bad.is_empty(), detail), draws)
}

pub fn rhat_hand_example() -> Check {
    let a = [1.0, 2.0, 3.0];
    let r = rhat(&[&a, &a]).unwrap();
    Check::new("R-hat {1,2,3}/{1,2,3}", (r - 0.8165).abs() < 1e-4, format!("{r:.6}"))
}

/// Every block a model exposes.
pub fn all_blocks(model: &Model) -> Vec<Block> {
    let mut blocks = vec![Block::D];
    for j in 0..model.outcomes.len() {
        blocks.push(Block::Beta(j));
        blocks.push(Block::Dispersion(j));
    }
    for i in 0..model.n_subjects() {
        blocks.push(Block::RandomEffects(i));
        if model.has_frailty() {
            blocks.push(Block::Frailty(i));
        }
    }
    if model.has_frailty() {
        blocks.push(Block::FrailtyScale);
    }
    for (h, hm) in model.hazards.iter().enumerate() {
        if hm.n_gamma() > 0 {
            blocks.push(Block::Gamma(h));
        }
        if hm.n_alpha() > 0 {
            blocks.push(Block::Alpha(h));
        }
        if !hm.recurrent && hm.config.frailty {
            blocks.push(Block::AlphaFrailty(h));
        }
        blocks.push(Block::Gamma0(h));
        blocks.push(Block::Tau(h));
    }
    blocks
}

/// Moves the parameters of `block`, and nothing else, by small random steps.
pub fn perturb<R: Rng>(model: &Model, state: &ParameterState, block: Block, rng: &mut R) -> ParameterState {
    let mut s = state.clone();
    let mut step = |x: &mut f64, size: f64| *x += size * (rng.random::<f64>() - 0.5);
    match block {
        Block::Beta(j) => s.beta[j].iter_mut().for_each(|b| step(b, 0.1)),
        Block::Dispersion(j) => {
            let mut f = 0.0;
            step(&mut f, 0.2);
            s.dispersion[j] *= f64::exp(f);
        }
        Block::D => {
            let mut l = s.d.clone().cholesky().unwrap().unpack();
            for a in 0..l.nrows() {
                for b in 0..=a {
                    let size = 0.05 * l[(a, a)].abs();
                    step(&mut l[(a, b)], size);
                }
            }
            s.d = &l * l.transpose();
        }
        Block::RandomEffects(i) => s.re[i].iter_mut().for_each(|b| step(b, 0.05)),
        Block::Frailty(i) => step(&mut s.frailty[i], 0.3),
        Block::FrailtyScale => {
            let mut f = 0.0;
            step(&mut f, 0.3);
            s.sigma_frailty *= f64::exp(f);
        }
        Block::Gamma(h) => s.hazards[h].gamma.iter_mut().for_each(|g| step(g, 0.2)),
        Block::Alpha(h) => s.hazards[h].alpha.iter_mut().for_each(|g| step(g, 0.2)),
        Block::AlphaFrailty(h) => step(&mut s.hazards[h].alpha_frailty, 0.2),
        Block::Gamma0(h) => s.hazards[h].gamma0.iter_mut().for_each(|g| step(g, 0.2)),
        Block::Tau(h) => {
            let mut f = 0.0;
            step(&mut f, 0.5);
            s.hazards[h].tau *= f64::exp(f);
        }
    }
    let _ = model;
    s
}

/// Conditional vs full log-posterior differences under single-block
/// perturbations of a 20-subject Scenario-A model.
pub fn factorization(perturbations: usize) -> Check {
    let sc = ScenarioConfig { seed: 4, ..ScenarioConfig::new(Scenario::A, 20) };
    let data = generate(&sc).unwrap();
    let model = Model::from_data(&data.longitudinal, &data.survival, &sc.fit_spec(Variant::Beta).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let base = initial_state(&model, 1, 0.1, &mut rng);
    let blocks = all_blocks(&model);
    assert!(blocks.len() > 0);
    let full0 = model.reference_log_posterior(&base).unwrap();
    let ws0 = Workspace::new(&model, base.clone()).unwrap();
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    // every structural block first, then random subject blocks
    let (subject, structural): (Vec<Block>, Vec<Block>) =
        blocks.iter().partition(|b| matches!(b, Block::RandomEffects(_) | Block::Frailty(_)));
    for k in 0..perturbations {
        let block = match structural.get(k) {
            Some(b) => *b,
            None => subject[rng.random_range(0..subject.len())],
        };
        let moved = perturb(&model, &base, block, &mut rng);
        let full1 = model.reference_log_posterior(&moved).unwrap();
        let ws1 = Workspace::new(&model, moved).unwrap();
        let dc = ws1.conditional_logpost(block) - ws0.conditional_logpost(block);
        let err = (dc - (full1 - full0)).abs();
        worst = worst.max(err);
        if !(err <= 1e-9) {
            bad.push(format!("{block}: {err:.2e}"));
        }
    }
    let detail = if bad.is_empty() {
        format!("{perturbations} perturbations, largest discrepancy {worst:.2e}")
    } else {
        bad.join(", ")
    };
    Check::new("conditional vs full differences", bad.is_empty(), detail)
}
