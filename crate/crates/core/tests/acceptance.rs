//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 2 run full replication studies and take tens of minutes
//! on a single core.

mod common;

use std::time::Instant;

use bounded_jm::basis::{gauss_kronrod_15, SplineBasis};
use bounded_jm::hazard::{cumulative_hazard, eval_form, BoundForm, HazardSpec, LinearTrajectory, SubjectInput, Trajectory};
use bounded_jm::longitudinal::{beta_loglik, expit};
use bounded_jm::mcmc::ChainConfig;
use bounded_jm::simulate::{
    generate, replicate_study, summarize_dataset, McmcFitter, ReplicaLog, Scenario, ScenarioConfig, StudyConfig, Variant,
};
use bounded_jm::spec::{FormKind, FunctionalForm, Timescale, Transform};
use common::{combine, report, Check};

/// Scenario-A biases reported for n = 1000 and 100 replicas.
const SCENARIO_A_BIAS: [(&str, f64); 15] = [
    ("beta_y1[intercept]", -0.001),
    ("beta_y1[time]", 0.001),
    ("beta_y2[intercept]", 0.000),
    ("beta_y2[time]", 0.000),
    ("gamma_R[group]", -0.010),
    ("alpha_R[y1.expit(value)]", -0.008),
    ("alpha_R[y2.value]", -0.003),
    ("gamma_CR1[group]", -0.016),
    ("alpha_CR1[y1.expit(value)]", -0.079),
    ("alpha_CR1[y2.value]", -0.019),
    ("alpha_frailty_CR1", 0.020),
    ("gamma_CR2[group]", -0.013),
    ("alpha_CR2[y1.expit(value)]", -0.026),
    ("alpha_CR2[y2.value]", -0.020),
    ("alpha_frailty_CR2", -0.005),
];

fn desk_chains() -> ChainConfig {
    ChainConfig { chains: 3, iterations: 3_000, warmup: 1_500, workers: 1, ..Default::default() }
}

fn progress(log: &ReplicaLog) {
    let status = match &log.error {
        Some(e) => format!("error {e}"),
        None => format!("max R-hat {:.3}", log.max_rhat.unwrap_or(f64::NAN)),
    };
    eprintln!("  replica {} [{}]: {status}, {:.0}s", log.replica, log.variant, log.seconds);
}

#[test]
fn criterion_1_scenario_a_recovery() {
    let start = Instant::now();
    let sc = ScenarioConfig { seed: 2024, ..ScenarioConfig::new(Scenario::A, 300) };
    let study = StudyConfig { replicas: 20, variants: vec![Variant::Beta], ..Default::default() };
    let result = replicate_study(&sc, &study, &McmcFitter { chains: desk_chains() }, &progress).unwrap();
    let mut parts = Vec::new();
    for (name, paper) in SCENARIO_A_BIAS {
        let row = result.row(Variant::Beta, name).unwrap_or_else(|| panic!("no row for {name}"));
        let limit = 5.0 * paper.abs() + 0.1;
        // Monte Carlo error of the replica-averaged bias
        let se = ((row.mse - row.bias * row.bias).max(0.0) / row.n_replicas as f64).sqrt();
        parts.push(Check::new(
            name,
            row.bias.abs() <= limit,
            format!("bias {:+.3} (limit {limit:.3}, MC se {se:.3}, {} kept)", row.bias, row.n_replicas),
        ));
    }
    let excluded = result.logs.iter().filter(|l| l.excluded).count();
    parts.push(Check::new("replicas", excluded < result.logs.len(), format!("{excluded} excluded")));
    let c = combine("Scenario-A recovery at n=300", &parts);
    report(1, &Check { detail: format!("{} [{:.0}s]", c.detail, start.elapsed().as_secs_f64()), ..c.clone() });
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn criterion_2_scenario_b_misspecification() {
    let start = Instant::now();
    let sc = ScenarioConfig { seed: 2025, ..ScenarioConfig::new(Scenario::B, 300) };
    let study = StudyConfig { replicas: 20, variants: vec![Variant::Beta, Variant::Gaussian], ..Default::default() };
    let result = replicate_study(&sc, &study, &McmcFitter { chains: desk_chains() }, &progress).unwrap();
    let name = "alpha_CR1[y1.expit(value)]";
    let beta = result.row(Variant::Beta, name).unwrap();
    let gauss = result.row(Variant::Gaussian, "alpha_CR1[y1.value]").unwrap();
    let beta_mean = beta.truth + beta.bias;
    let parts = [
        Check::new("beta variant", (beta_mean - -2.0).abs() <= 0.5, format!("mean {beta_mean:.3}")),
        Check::new("Gaussian variant", gauss.bias.abs() > 3.0, format!("bias {:+.3}", gauss.bias)),
        Check::new(
            "gap",
            gauss.bias.abs() >= 5.0 * beta.bias.abs(),
            format!("ratio {:.1}", gauss.bias.abs() / beta.bias.abs()),
        ),
    ];
    let c = combine("Scenario-B misspecification effect", &parts);
    report(2, &Check { detail: format!("{} [{:.0}s]", c.detail, start.elapsed().as_secs_f64()), ..c.clone() });
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn criterion_3_generator_fidelity() {
    let start = Instant::now();
    let mean_over = |scenario: Scenario, f: &dyn Fn(&bounded_jm::simulate::DatasetSummary) -> f64| {
        let mut total = 0.0;
        for r in 0..20u64 {
            let sc = ScenarioConfig { seed: 500 + r, ..ScenarioConfig::new(scenario, 1000) };
            total += f(&summarize_dataset(&generate(&sc).unwrap()));
        }
        total / 20.0
    };
    let events_b = mean_over(Scenario::B, &|s| s.cause_fractions[0]);
    let censored_a = mean_over(Scenario::A, &|s| s.censored_fraction);
    let secs = start.elapsed().as_secs_f64();
    let parts = [
        Check::new("Scenario-B events", (events_b - 0.54).abs() <= 0.04, format!("{events_b:.3}")),
        Check::new("Scenario-A censored", (censored_a - 0.17).abs() <= 0.04, format!("{censored_a:.3}")),
        Check::new("runtime", secs < 60.0, format!("{secs:.1}s")),
    ];
    let c = combine("generator fidelity (20 replicas of n=1000)", &parts);
    report(3, &c);
    assert!(c.pass, "{}", c.detail);
}

fn gk15_vs_analytic() -> Check {
    let cases: [(&str, Box<dyn Fn(f64) -> f64>, f64, f64, f64); 4] = [
        ("x^5 on [0,2]", Box::new(|x: f64| x.powi(5)), 0.0, 2.0, 64.0 / 6.0),
        ("exp on [0,1]", Box::new(f64::exp), 0.0, 1.0, std::f64::consts::E - 1.0),
        ("cos on [0,π/2]", Box::new(f64::cos), 0.0, std::f64::consts::FRAC_PI_2, 1.0),
        ("1/(1+x) on [0,1]", Box::new(|x: f64| 1.0 / (1.0 + x)), 0.0, 1.0, std::f64::consts::LN_2),
    ];
    let mut worst: f64 = 0.0;
    for (_, f, a, b, exact) in &cases {
        let v = gauss_kronrod_15(f, *a, *b).unwrap();
        worst = worst.max(((v - exact) / exact).abs());
    }
    Check::new("GK15", worst < 1e-10, format!("max rel. err {worst:.1e}"))
}

fn inversion_residuals() -> Check {
    let mut worst: f64 = 0.0;
    for (s, seed) in [(Scenario::A, 1), (Scenario::B, 2)] {
        let sc = ScenarioConfig { seed, ..ScenarioConfig::new(s, 500) };
        worst = worst.max(generate(&sc).unwrap().max_inversion_residual);
    }
    Check::new("inversion", worst < 1e-8, format!("max residual {worst:.1e}"))
}

fn beta_normalization() -> Check {
    let mut worst: f64 = 0.0;
    for (mu, phi) in [(0.3, 10.0), (0.5, 2.0), (0.8, 50.0), (0.1, 200.0)] {
        let breaks: Vec<f64> = (1..200).map(|k| k as f64 / 200.0).collect();
        let mut total = 0.0;
        let mut lo = 0.0;
        for &hi in breaks.iter().chain(std::iter::once(&1.0)) {
            total += gauss_kronrod_15(|y| beta_loglik(y, mu, phi).unwrap().exp(), lo, hi).unwrap();
            lo = hi;
        }
        worst = worst.max((total - 1.0).abs());
    }
    Check::new("beta density", worst < 1e-6, format!("max |∫f − 1| {worst:.1e}"))
}

fn forms_vs_finite_differences() -> Check {
    let traj = LinearTrajectory { intercept: 0.4, slope: -0.7 };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in [0.2, 1.0, 3.5] {
        let fd = |f: &dyn Fn(f64) -> f64| (f(t + h) - f(t - h)) / (2.0 * h);
        let slope = eval_form(&FunctionalForm::new("y", FormKind::Slope, Transform::Identity), &traj, t).unwrap()[0];
        let want_slope = fd(&|s| traj.value(s));
        let dexpit = eval_form(&FunctionalForm::new("y", FormKind::Slope, Transform::Dexpit), &traj, t).unwrap()[0];
        let want_dexpit = fd(&|s| expit(traj.value(s)));
        let dexp = eval_form(&FunctionalForm::new("y", FormKind::Slope, Transform::Dexp), &traj, t).unwrap()[0];
        let want_dexp = fd(&|s| traj.value(s).exp());
        for (got, want) in [(slope, want_slope), (dexpit, want_dexpit), (dexp, want_dexp)] {
            worst = worst.max(((got - want) / want).abs());
        }
    }
    Check::new("slope/Dexpit/Dexp", worst < 1e-6, format!("max rel. err {worst:.1e}"))
}

fn hazard_additivity() -> Check {
    let basis = SplineBasis::uniform(0.0, 10.0, 8, 2).unwrap();
    let spec = HazardSpec {
        stratum: "CR1".into(),
        basis,
        gamma0: vec![-1.0, -0.6, -0.9, -1.4, -0.8, -0.3, -0.5, -1.1],
        gamma: vec![0.3],
        forms: vec![
            BoundForm { form: FunctionalForm::new("y", FormKind::Value, Transform::Expit), outcome: 0 },
            BoundForm { form: FunctionalForm::new("y", FormKind::Area, Transform::Identity), outcome: 0 },
        ],
        alpha: vec![-1.5, 0.4],
        frailty_coef: 0.8,
        timescale: Timescale::Calendar,
    };
    let traj = LinearTrajectory { intercept: 1.2, slope: -0.4 };
    let subj = SubjectInput { trajectories: vec![&traj], frailty: 0.25 };
    let w = [1.0];
    let mut worst: f64 = 0.0;
    for (a, b, c) in [(0.1, 2.7, 6.3), (1.0, 1.3, 9.9), (4.4, 7.1, 7.2)] {
        let whole = cumulative_hazard(&spec, 0.0, a, c, &w, &subj).unwrap();
        let parts = cumulative_hazard(&spec, 0.0, a, b, &w, &subj).unwrap()
            + cumulative_hazard(&spec, 0.0, b, c, &w, &subj).unwrap();
        worst = worst.max((whole - parts).abs());
    }
    Check::new("hazard additivity", worst < 1e-9, format!("max |H(a,c) − H(a,b) − H(b,c)| {worst:.1e}"))
}

#[test]
fn criterion_4_numerical_kernels() {
    let start = Instant::now();
    let mut parts = vec![
        gk15_vs_analytic(),
        inversion_residuals(),
        beta_normalization(),
        forms_vs_finite_differences(),
        hazard_additivity(),
    ];
    let secs = start.elapsed().as_secs_f64();
    parts.push(Check::new("runtime", secs < 60.0, format!("{secs:.1}s")));
    let c = combine("numerical kernels", &parts);
    report(4, &c);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn criterion_5_sampler_oracles() {
    let start = Instant::now();
    let (prior, lines) = common::prior_recovery();
    for l in &lines {
        eprintln!("  {l}");
    }
    let (accept, _) = common::acceptance_calibration();
    let mut parts = vec![common::conjugate_normal(), prior, accept, common::rhat_hand_example()];
    let secs = start.elapsed().as_secs_f64();
    parts.push(Check::new("runtime", secs < 600.0, format!("{secs:.0}s")));
    let c = combine("sampler oracles", &parts);
    report(5, &c);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn criterion_6_factorization() {
    let start = Instant::now();
    let mut parts = vec![common::factorization(50)];
    let secs = start.elapsed().as_secs_f64();
    parts.push(Check::new("runtime", secs < 60.0, format!("{secs:.1}s")));
    let c = combine("conditional-posterior factorization", &parts);
    report(6, &c);
    assert!(c.pass, "{}", c.detail);
}
