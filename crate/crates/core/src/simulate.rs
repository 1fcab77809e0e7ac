//! Synthetic joint datasets for the two simulation scenarios and the
//! replication harness that turns repeated fits into bias/MSE tables.
//!
//! Scenario A has a beta and a Gaussian marker, a recurrent process and two
//! competing causes sharing a frailty. Scenario B has one beta marker and a
//! single terminal event, and is fitted both with the generating model and
//! with a Gaussian marker to expose the cost of ignoring the bounds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::gauss_kronrod_15_split;
use crate::data::{LongRow, LongitudinalDataset, SurvRow, SurvivalDataset};
use crate::error::{invalid, JmError, Result};
use crate::longitudinal::expit;
use crate::mcmc::{run_chains, ChainConfig};
use crate::model::Model;
use crate::spec::{
    Family, FormKind, FunctionalForm, GammaPrior, HazardConfig, ModelSpec, OutcomeSpec, Term, Transform,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::A => "A",
            Scenario::B => "B",
        })
    }
}

/// How the first marker is modelled when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The generating model: beta marker, association on `expit(η)`.
    Beta,
    /// Gaussian marker on the response scale, association on `η`.
    Gaussian,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Beta => "beta",
            Variant::Gaussian => "gaussian",
        })
    }
}

/// Fixed intercept and slope, random-effect sds and the dispersion (`φ` for
/// the beta marker, the residual sd for the Gaussian one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerTruth {
    pub beta: [f64; 2],
    pub re_sd: [f64; 2],
    pub dispersion: f64,
}

/// A hazard with constant baseline `h0`, group effect `gamma`, one
/// association per form and the frailty coefficient (ignored for the
/// recurrent process, where it is 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardTruth {
    pub h0: f64,
    pub gamma: f64,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub alpha_frailty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub markers: Vec<MarkerTruth>,
    #[serde(default)]
    pub recurrent: Option<HazardTruth>,
    pub causes: Vec<HazardTruth>,
    #[serde(default)]
    pub sigma_frailty: f64,
    pub group_prob: f64,
}

impl GeneratorParams {
    pub fn scenario_a() -> Self {
        let y1 = MarkerTruth { beta: [2.0, -1.5], re_sd: [0.25, 0.15], dispersion: 1e4 };
        let y2 = MarkerTruth { beta: [0.8, -0.05], re_sd: [0.01, 0.01], dispersion: 0.005 };
        let cause = HazardTruth { h0: 0.2, gamma: 0.25, alpha: vec![-2.0, -1.0], alpha_frailty: 1.0 };
        Self {
            markers: vec![y1, y2],
            recurrent: Some(HazardTruth { h0: 2.0, ..cause.clone() }),
            causes: vec![cause.clone(), cause],
            sigma_frailty: 0.8,
            group_prob: 0.5,
        }
    }

    pub fn scenario_b() -> Self {
        Self {
            markers: vec![MarkerTruth { beta: [2.0, -1.0], re_sd: [0.25, 0.15], dispersion: 1e4 }],
            recurrent: None,
            causes: vec![HazardTruth { h0: 0.1, gamma: 0.25, alpha: vec![-2.0], alpha_frailty: 0.0 }],
            sigma_frailty: 0.0,
            group_prob: 0.5,
        }
    }

    pub fn for_scenario(s: Scenario) -> Self {
        match s {
            Scenario::A => Self::scenario_a(),
            Scenario::B => Self::scenario_b(),
        }
    }
}

/// Generator settings. `visits` and `params` default to the scenario's
/// design when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub t_max: f64,
    /// Planned visits per subject including time 0, before truncation.
    #[serde(default)]
    pub visits: Option<usize>,
    #[serde(default)]
    pub params: Option<GeneratorParams>,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_VISITS: usize = 20;

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize) -> Self {
        Self { scenario, n, t_max: 10.0, visits: None, params: None, seed: 1 }
    }

    pub fn visit_count(&self) -> usize {
        self.visits.unwrap_or(DEFAULT_VISITS)
    }

    pub fn generator(&self) -> GeneratorParams {
        self.params.clone().unwrap_or_else(|| GeneratorParams::for_scenario(self.scenario))
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.generator();
        if self.n == 0 {
            return Err(invalid("scenario.n must be at least 1"));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(invalid("scenario.t_max must be positive and finite"));
        }
        if self.visit_count() == 0 {
            return Err(invalid("scenario.visits must be at least 1"));
        }
        if !(0.0..=1.0).contains(&p.group_prob) {
            return Err(invalid("scenario.params.group_prob must lie in [0, 1]"));
        }
        if !(p.sigma_frailty >= 0.0 && p.sigma_frailty.is_finite()) {
            return Err(invalid("scenario.params.sigma_frailty must be nonnegative"));
        }
        for (j, m) in p.markers.iter().enumerate() {
            if m.re_sd.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(invalid(format!("scenario.params.markers[{j}].re_sd must be nonnegative")));
            }
            if !(m.dispersion > 0.0 && m.dispersion.is_finite()) {
                return Err(invalid(format!("scenario.params.markers[{j}].dispersion must be positive")));
            }
            if m.beta.iter().any(|b| !b.is_finite()) {
                return Err(invalid(format!("scenario.params.markers[{j}].beta must be finite")));
            }
        }
        let (markers, causes, recurrent) = match self.scenario {
            Scenario::A => (2, 2, true),
            Scenario::B => (1, 1, false),
        };
        if p.markers.len() != markers || p.causes.len() != causes || p.recurrent.is_some() != recurrent {
            return Err(invalid(format!(
                "scenario {} needs {markers} marker(s), {causes} cause(s) and {} recurrent process",
                self.scenario,
                if recurrent { "a" } else { "no" }
            )));
        }
        for (name, h) in p.causes.iter().enumerate().map(|(k, h)| (format!("causes[{k}]"), h)).chain(
            p.recurrent.iter().map(|h| ("recurrent".to_string(), h)),
        ) {
            if !(h.h0 > 0.0 && h.h0.is_finite()) {
                return Err(invalid(format!("scenario.params.{name}.h0 must be positive")));
            }
            if h.alpha.len() != markers {
                return Err(invalid(format!("scenario.params.{name}.alpha needs {markers} value(s)")));
            }
            if !h.gamma.is_finite() || h.alpha.iter().any(|a| !a.is_finite()) || !h.alpha_frailty.is_finite() {
                return Err(invalid(format!("scenario.params.{name}: coefficients must be finite")));
            }
        }
        Ok(())
    }

    /// The model fitted to this scenario's data under `variant`.
    pub fn fit_spec(&self, variant: Variant) -> Result<ModelSpec> {
        let marker = |name: &str, family| OutcomeSpec {
            name: name.into(),
            family,
            link: None,
            fixed: vec![Term::Intercept, Term::Time],
            random: vec![Term::Intercept, Term::Time],
            bounds: None,
        };
        let (y1, form1) = match variant {
            Variant::Beta => {
                (marker("y1", Family::Beta), FunctionalForm::new("y1", FormKind::Value, Transform::Expit))
            }
            Variant::Gaussian => (marker("y1", Family::Gaussian), FunctionalForm::value("y1")),
        };
        let hazard = |stratum: &str, forms: Vec<FunctionalForm>, frailty| HazardConfig {
            stratum: stratum.into(),
            covariates: vec!["group".into()],
            forms,
            frailty,
        };
        let spec = match (self.scenario, variant) {
            (Scenario::A, Variant::Beta) => {
                let forms = vec![form1, FunctionalForm::value("y2")];
                ModelSpec {
                    outcomes: vec![y1, marker("y2", Family::Gaussian)],
                    hazards: vec![
                        hazard("R", forms.clone(), true),
                        hazard("CR1", forms.clone(), true),
                        hazard("CR2", forms, true),
                    ],
                    timescale: Default::default(),
                    spline: Default::default(),
                    priors: Default::default(),
                    standardize: true,
                }
            }
            (Scenario::A, Variant::Gaussian) => {
                return Err(invalid("the Gaussian variant is defined for scenario B only"));
            }
            (Scenario::B, _) => ModelSpec {
                outcomes: vec![y1],
                hazards: vec![hazard("CR1", vec![form1], false)],
                timescale: Default::default(),
                spline: Default::default(),
                priors: Default::default(),
                standardize: true,
            },
        };
        let mut spec = spec;
        // the default φ prior (mean 10) would pull a precision of 10⁴ far down
        spec.priors.phi = GammaPrior { shape: 1.0, rate: 1e-5 };
        spec.check()?;
        Ok(spec)
    }

    /// True values keyed by the parameter names of the `variant` fit.
    /// Parameters without a counterpart in the generator (the Gaussian
    /// residual sd, smoothing precisions) are absent.
    pub fn truth(&self, variant: Variant) -> Result<BTreeMap<String, f64>> {
        let spec = self.fit_spec(variant)?;
        let p = self.generator();
        let mut out = BTreeMap::new();
        let mut re_names = Vec::new();
        let mut re_var = Vec::new();
        for (o, m) in spec.outcomes.iter().zip(&p.markers) {
            for (name, b) in o.fixed_names().iter().zip(m.beta) {
                out.insert(format!("beta_{}[{name}]", o.name), b);
            }
            match (o.family, o.name.as_str(), variant) {
                (Family::Beta, _, _) => {
                    out.insert(format!("phi_{}", o.name), m.dispersion);
                }
                (Family::Gaussian, "y1", Variant::Gaussian) => {}
                (Family::Gaussian, _, _) => {
                    out.insert(format!("sigma_{}", o.name), m.dispersion);
                }
            }
            for (name, sd) in o.random_names().iter().zip(m.re_sd) {
                re_names.push(format!("{}:{name}", o.name));
                re_var.push(sd * sd);
            }
        }
        for a in 0..re_names.len() {
            for b in 0..=a {
                let v = if a == b { re_var[a] } else { 0.0 };
                out.insert(format!("D[{},{}]", re_names[a], re_names[b]), v);
            }
        }
        let hazards: Vec<(&HazardConfig, &HazardTruth)> = spec
            .hazards
            .iter()
            .map(|h| {
                let t = if h.is_recurrent() {
                    p.recurrent.as_ref().expect("validated structure")
                } else {
                    let k: usize = h.stratum[2..].parse().expect("cause strata are CR<k>");
                    &p.causes[k - 1]
                };
                (h, t)
            })
            .collect();
        for (h, t) in hazards {
            let s = &h.stratum;
            out.insert(format!("gamma_{s}[group]"), t.gamma);
            for (label, a) in h.alpha_labels().iter().zip(&t.alpha) {
                out.insert(format!("alpha_{s}[{label}]"), *a);
            }
            if h.frailty && !h.is_recurrent() {
                out.insert(format!("alpha_frailty_{s}"), t.alpha_frailty);
            }
            // a constant baseline is the same constant in every B-spline
            // coefficient, the basis being a partition of unity
            for k in 0..spec.spline.q {
                out.insert(format!("gamma0_{s}[{}]", k + 1), t.h0.ln());
            }
        }
        if spec.has_frailty() {
            out.insert("sigma_frailty".into(), p.sigma_frailty);
        }
        Ok(out)
    }
}

/// Solves `exp(−H(t)) = u` for `t` in `[0, t_max]` by bisection. `None`
/// when `H(t_max) < −ln u`, i.e. the event happens after `t_max`.
pub fn invert_survival<F: FnMut(f64) -> f64>(u: f64, mut cum_hazard: F, t_max: f64) -> Option<f64> {
    if !(u > 0.0 && u < 1.0) {
        return if u >= 1.0 { Some(0.0) } else { None };
    }
    let target = -u.ln();
    if !(cum_hazard(t_max) >= target) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, t_max);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cum_hazard(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// A generated dataset with the latent values behind it.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub longitudinal: LongitudinalDataset,
    pub survival: SurvivalDataset,
    /// Named true parameter values of the generating (beta) model.
    pub truth: BTreeMap<String, f64>,
    /// Per subject: the stacked random effects, marker by marker.
    pub random_effects: Vec<Vec<f64>>,
    pub frailty: Vec<f64>,
    /// Largest `|exp(−H(t*)) − u|` over all inverted event times.
    pub max_inversion_residual: f64,
}

#[derive(Serialize)]
struct TruthFile<'a> {
    scenario: Scenario,
    parameters: &'a BTreeMap<String, f64>,
    random_effects: &'a [Vec<f64>],
    frailty: &'a [f64],
}

impl SimulatedData {
    pub fn write_truth<W: Write>(&self, scenario: Scenario, writer: W) -> Result<()> {
        let file = TruthFile {
            scenario,
            parameters: &self.truth,
            random_effects: &self.random_effects,
            frailty: &self.frailty,
        };
        serde_json::to_writer_pretty(writer, &file)?;
        Ok(())
    }

    /// Writes `longitudinal.csv`, `survival.csv` and `truth.json` into `dir`.
    pub fn save(&self, scenario: Scenario, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.longitudinal.save(dir.join("longitudinal.csv"))?;
        self.survival.save(dir.join("survival.csv"))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("truth.json"))?);
        self.write_truth(scenario, &mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Log-hazard of one subject: `ln h0 + γ w + Σ α_j f_j(t) + c υ` with
/// `f_1 = expit(η_1)` and `f_2 = η_2`.
struct SubjectHazard<'a> {
    truth: &'a HazardTruth,
    w: f64,
    frailty_term: f64,
    eta: &'a [(f64, f64)],
}

impl SubjectHazard<'_> {
    fn rate(&self, t: f64) -> f64 {
        let mut lh = self.truth.h0.ln() + self.truth.gamma * self.w + self.frailty_term;
        for (j, ((a, b), alpha)) in self.eta.iter().zip(&self.truth.alpha).enumerate() {
            let e = a + b * t;
            lh += alpha * if j == 0 { expit(e) } else { e };
        }
        lh.exp()
    }

    /// `∫_s^{s+x} h`, GK15 on unit pieces.
    fn cumulative(&self, s: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let breaks: Vec<f64> = (1..).map(|k| s + k as f64).take_while(|&b| b < s + x).collect();
        gauss_kronrod_15_split(|t| self.rate(t), s, s + x, &breaks).expect("finite hazard")
    }
}

fn subject_label(i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("s{:0width$}", i + 1)
}

/// Draws one dataset. Both scenarios follow the same steps: random effects,
/// visit times (time 0 plus uniform visits), marker values, group, event
/// times by inversion, truncation of post-event visits, and for scenario A
/// recurrent events on the calendar clock until the terminal time.
pub fn generate(cfg: &ScenarioConfig) -> Result<SimulatedData> {
    cfg.validate()?;
    let p = cfg.generator();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let n_markers = p.markers.len();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let group = Bernoulli::new(p.group_prob).map_err(|e| invalid(e.to_string()))?;
    let outcomes: Vec<String> = (1..=n_markers).map(|j| format!("y{j}")).collect();
    let mut long = LongitudinalDataset { outcomes, rows: Vec::new() };
    let mut surv = SurvivalDataset { covariates: vec!["group".into()], rows: Vec::new() };
    let mut random_effects = Vec::with_capacity(n);
    let mut frailties = Vec::with_capacity(n);
    let mut residual: f64 = 0.0;

    for i in 0..n {
        let id = subject_label(i, n);
        // random effects, then the subject's linear predictors (a, b)
        let mut re = Vec::with_capacity(2 * n_markers);
        let mut eta = Vec::with_capacity(n_markers);
        for m in &p.markers {
            let b0 = m.re_sd[0] * std_normal.sample(&mut rng);
            let b1 = m.re_sd[1] * std_normal.sample(&mut rng);
            re.extend([b0, b1]);
            eta.push((m.beta[0] + b0, m.beta[1] + b1));
        }
        let mut times = vec![0.0];
        times.extend((1..cfg.visit_count()).map(|_| rng.random_range(0.0..cfg.t_max)));
        times.sort_by(f64::total_cmp);
        let mut rows = Vec::with_capacity(times.len());
        for &t in &times {
            let mut values = Vec::with_capacity(n_markers);
            for (j, (m, (a, b))) in p.markers.iter().zip(&eta).enumerate() {
                let e = a + b * t;
                let y = if j == 0 {
                    let mu = expit(e);
                    let d = Beta::new(m.dispersion * mu, m.dispersion * (1.0 - mu))
                        .map_err(|e| invalid(format!("beta draw: {e}")))?;
                    // keep draws representable on the log scale
                    d.sample(&mut rng).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
                } else {
                    e + m.dispersion * std_normal.sample(&mut rng)
                };
                values.push(Some(y));
            }
            rows.push(LongRow { subject: id.clone(), time: t, values });
        }

        let w = if group.sample(&mut rng) { 1.0 } else { 0.0 };
        let upsilon = if p.recurrent.is_some() { p.sigma_frailty * std_normal.sample(&mut rng) } else { 0.0 };

        // competing event times
        let mut exit = cfg.t_max;
        let mut cause = 0usize;
        for (k, c) in p.causes.iter().enumerate() {
            let u: f64 = rng.random();
            let haz = SubjectHazard { truth: c, w, frailty_term: c.alpha_frailty * upsilon, eta: &eta };
            if let Some(t) = invert_survival(u, |t| haz.cumulative(0.0, t), cfg.t_max) {
                residual = residual.max(((-haz.cumulative(0.0, t)).exp() - u).abs());
                if t < exit {
                    exit = t;
                    cause = k + 1;
                }
            }
        }
        rows.retain(|r| r.time <= exit);
        long.rows.extend(rows);
        let covariates = vec![w];

        if let Some(r) = &p.recurrent {
            let haz = SubjectHazard { truth: r, w, frailty_term: upsilon, eta: &eta };
            let mut start = 0.0;
            loop {
                let u: f64 = rng.random();
                match invert_survival(u, |x| haz.cumulative(start, x), exit - start) {
                    Some(x) if start + x < exit => {
                        residual = residual.max(((-haz.cumulative(start, x)).exp() - u).abs());
                        let stop = start + x;
                        surv.rows.push(SurvRow {
                            subject: id.clone(),
                            tstart: start,
                            tstop: stop,
                            status: 1,
                            stratum: "R".into(),
                            covariates: covariates.clone(),
                        });
                        start = stop;
                    }
                    _ => {
                        surv.rows.push(SurvRow {
                            subject: id.clone(),
                            tstart: start,
                            tstop: exit,
                            status: 0,
                            stratum: "R".into(),
                            covariates: covariates.clone(),
                        });
                        break;
                    }
                }
            }
        }
        for k in 1..=p.causes.len() {
            surv.rows.push(SurvRow {
                subject: id.clone(),
                tstart: 0.0,
                tstop: exit,
                status: u8::from(cause == k),
                stratum: format!("CR{k}"),
                covariates: covariates.clone(),
            });
        }
        random_effects.push(re);
        frailties.push(upsilon);
    }
    Ok(SimulatedData {
        longitudinal: long,
        survival: surv,
        truth: cfg.truth(Variant::Beta)?,
        random_effects,
        frailty: if p.recurrent.is_some() { frailties } else { Vec::new() },
        max_inversion_residual: residual,
    })
}

/// Scenario A generator; errors if `cfg` describes another scenario.
pub fn generate_scenario_a(cfg: &ScenarioConfig) -> Result<SimulatedData> {
    if cfg.scenario != Scenario::A {
        return Err(invalid("generate_scenario_a needs scenario A"));
    }
    generate(cfg)
}

/// Scenario B generator; errors if `cfg` describes another scenario.
pub fn generate_scenario_b(cfg: &ScenarioConfig) -> Result<SimulatedData> {
    if cfg.scenario != Scenario::B {
        return Err(invalid("generate_scenario_b needs scenario B"));
    }
    generate(cfg)
}

/// Event and censoring fractions of a generated survival dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub subjects: usize,
    /// Fraction of subjects ending with each cause, in cause order.
    pub cause_fractions: Vec<f64>,
    pub censored_fraction: f64,
    pub median_observations: f64,
    pub mean_observations: f64,
    pub median_recurrent_events: f64,
    pub group_fraction: f64,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn summarize_dataset(data: &SimulatedData) -> DatasetSummary {
    let mut causes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut subjects: BTreeMap<&str, (bool, f64, usize)> = BTreeMap::new();
    for r in &data.survival.rows {
        let e = subjects.entry(&r.subject).or_insert((false, r.covariates[0], 0));
        if r.stratum == "R" {
            e.2 += r.status as usize;
        } else {
            causes.entry(&r.stratum).or_insert(0);
            if r.status == 1 {
                e.0 = true;
                *causes.get_mut(r.stratum.as_str()).unwrap() += 1;
            }
        }
    }
    let n = subjects.len().max(1) as f64;
    let mut obs: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &data.longitudinal.rows {
        *obs.entry(&r.subject).or_insert(0) += 1;
    }
    let mut counts: Vec<f64> = subjects.keys().map(|s| obs.get(s).copied().unwrap_or(0) as f64).collect();
    let mean_observations = counts.iter().sum::<f64>() / n;
    let mut rec: Vec<f64> = subjects.values().map(|v| v.2 as f64).collect();
    DatasetSummary {
        subjects: subjects.len(),
        cause_fractions: causes.values().map(|&c| c as f64 / n).collect(),
        censored_fraction: subjects.values().filter(|v| !v.0).count() as f64 / n,
        median_observations: median(&mut counts),
        mean_observations,
        median_recurrent_events: median(&mut rec),
        group_fraction: subjects.values().map(|v| v.1).sum::<f64>() / n,
    }
}

/// What a fitter reports for one dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FitOutcome {
    /// Posterior means keyed by parameter name.
    pub estimates: BTreeMap<String, f64>,
    /// Largest R̂ over the monitored parameters, when computed.
    pub max_rhat: Option<f64>,
}

pub trait Fitter: Sync {
    fn fit(
        &self,
        spec: &ModelSpec,
        long: &LongitudinalDataset,
        surv: &SurvivalDataset,
        truth: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<FitOutcome>;
}

/// Fits by MCMC and reports posterior means.
#[derive(Debug, Clone, Default)]
pub struct McmcFitter {
    pub chains: ChainConfig,
}

impl Fitter for McmcFitter {
    fn fit(
        &self,
        spec: &ModelSpec,
        long: &LongitudinalDataset,
        surv: &SurvivalDataset,
        _truth: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<FitOutcome> {
        let model = Model::from_data(long, surv, spec)?;
        let cfg = ChainConfig { seed, ..self.chains.clone() };
        let draws = run_chains(&model, &cfg)?;
        let rows = draws.summarize(false)?;
        Ok(FitOutcome {
            estimates: rows.into_iter().map(|r| (r.parameter, r.mean)).collect(),
            max_rhat: if cfg.chains > 1 { draws.max_rhat() } else { None },
        })
    }
}

/// Returns the truth as the estimate; checks the harness itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthFitter;

impl Fitter for TruthFitter {
    fn fit(
        &self,
        _spec: &ModelSpec,
        _long: &LongitudinalDataset,
        _surv: &SurvivalDataset,
        truth: &BTreeMap<String, f64>,
        _seed: u64,
    ) -> Result<FitOutcome> {
        Ok(FitOutcome { estimates: truth.clone(), max_rhat: Some(1.0) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub replicas: usize,
    pub variants: Vec<Variant>,
    /// Replicas whose largest R̂ reaches this value are excluded.
    pub rhat_threshold: f64,
    /// Replicas fitted concurrently; 0 uses every available core.
    pub workers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { replicas: 20, variants: vec![Variant::Beta], rhat_threshold: 1.10, workers: 0 }
    }
}

/// One fit of one replica.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaLog {
    pub replica: usize,
    pub variant: Variant,
    pub data_seed: u64,
    pub fit_seed: u64,
    pub max_rhat: Option<f64>,
    pub excluded: bool,
    pub error: Option<String>,
    pub seconds: f64,
    pub estimates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub scenario: Scenario,
    pub variant: Variant,
    pub parameter: String,
    pub truth: f64,
    pub bias: f64,
    pub mse: f64,
    pub n_replicas: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Study {
    pub rows: Vec<BiasRow>,
    pub logs: Vec<ReplicaLog>,
}

impl Study {
    pub fn row(&self, variant: Variant, parameter: &str) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.variant == variant && r.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.next_u64()
}

/// Seeds of replica `r`: one for its data, one per variant for its fit.
pub fn replica_seeds(seed: u64, replica: usize, variant: Variant) -> (u64, u64) {
    (mix(seed, replica as u64, 0), mix(seed, replica as u64, 1 + variant as u64))
}

/// Generates `study.replicas` datasets and fits every variant to each.
/// Bias and MSE are averaged over the replicas that fitted and converged.
/// A failed fit is logged and counted as excluded; the study carries on.
pub fn replicate_study(
    cfg: &ScenarioConfig,
    study: &StudyConfig,
    fitter: &dyn Fitter,
    progress: &(dyn Fn(&ReplicaLog) + Sync),
) -> Result<Study> {
    cfg.validate()?;
    if study.replicas < 2 {
        return Err(invalid("a study needs at least 2 replicas"));
    }
    if study.variants.is_empty() {
        return Err(invalid("a study needs at least one variant"));
    }
    let mut specs = Vec::new();
    let mut truths = Vec::new();
    for &v in &study.variants {
        specs.push(cfg.fit_spec(v)?);
        truths.push(cfg.truth(v)?);
    }
    let run = |replica: usize| -> Vec<ReplicaLog> {
        let (data_seed, _) = replica_seeds(cfg.seed, replica, Variant::Beta);
        let data = generate(&ScenarioConfig { seed: data_seed, ..cfg.clone() });
        let mut logs = Vec::new();
        for (k, &variant) in study.variants.iter().enumerate() {
            let (_, fit_seed) = replica_seeds(cfg.seed, replica, variant);
            let start = std::time::Instant::now();
            let fitted = data.as_ref().map_err(|e| e.to_string()).and_then(|d| {
                fitter
                    .fit(&specs[k], &d.longitudinal, &d.survival, &truths[k], fit_seed)
                    .map_err(|e| e.to_string())
            });
            let log = match fitted {
                Ok(f) => ReplicaLog {
                    replica,
                    variant,
                    data_seed,
                    fit_seed,
                    max_rhat: f.max_rhat,
                    excluded: f.max_rhat.map_or(false, |r| !(r < study.rhat_threshold)),
                    error: None,
                    seconds: start.elapsed().as_secs_f64(),
                    estimates: f.estimates,
                },
                Err(e) => ReplicaLog {
                    replica,
                    variant,
                    data_seed,
                    fit_seed,
                    max_rhat: None,
                    excluded: true,
                    error: Some(e),
                    seconds: start.elapsed().as_secs_f64(),
                    estimates: BTreeMap::new(),
                },
            };
            progress(&log);
            logs.push(log);
        }
        logs
    };
    let workers = if study.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        study.workers
    };
    let logs: Vec<ReplicaLog> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| JmError::InvalidInput(e.to_string()))?;
        pool.install(|| (0..study.replicas).into_par_iter().flat_map_iter(run).collect())
    } else {
        (0..study.replicas).flat_map(run).collect()
    };

    let mut rows = Vec::new();
    for (k, &variant) in study.variants.iter().enumerate() {
        let mine: Vec<&ReplicaLog> = logs.iter().filter(|l| l.variant == variant).collect();
        let kept: Vec<&&ReplicaLog> = mine.iter().filter(|l| !l.excluded).collect();
        let n_excluded = mine.len() - kept.len();
        for (name, &truth) in &truths[k] {
            let errs: Vec<f64> = kept.iter().filter_map(|l| l.estimates.get(name)).map(|e| e - truth).collect();
            let m = errs.len().max(1) as f64;
            let (bias, mse) = if errs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (errs.iter().sum::<f64>() / m, errs.iter().map(|e| e * e).sum::<f64>() / m)
            };
            rows.push(BiasRow {
                scenario: cfg.scenario,
                variant,
                parameter: name.clone(),
                truth,
                bias,
                mse,
                n_replicas: errs.len(),
                n_excluded,
            });
        }
    }
    Ok(Study { rows, logs })
}
