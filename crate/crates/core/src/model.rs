//! The compiled joint model: per-subject design data, parameter state,
//! likelihood caches and block conditionals.
//!
//! Subject-specific coefficients are stored centered: for every random
//! term that repeats a fixed term, the stored value is `β + b_i`, so the
//! fixed effect is the mean of the random-effects distribution. Survival
//! covariates are standardized internally; [`Model::named_values`]
//! reports coefficients on the original scale.

use std::fmt;

use nalgebra::DMatrix;

use crate::basis::{difference_penalty, gk15_points, split_interval, BasisRow, Derivative, PenaltyMatrix, SplineBasis};
use crate::data::{build_design_views, validate, DesignViews, LongitudinalDataset, SurvivalDataset};
use crate::error::{invalid, numerical, JmError, Result};
use crate::hazard::{
    recurrent_loglik, terminal_loglik, BoundForm, DesignTrajectory, HazardSpec, RiskInterval, SubjectInput,
    TerminalRecord, Trajectory,
};
use crate::hazard::apply_transform;
use crate::longitudinal::{
    beta_fisher_eta, beta_loglik, beta_loglik_unchecked, dot, expit, gaussian_loglik, mvn_logdensity_chol,
    DesignColumns, LN_2PI,
};
use crate::mcmc::priors::{lkj_logpdf, penalized_normal_logpdf};
use crate::mcmc::transform::decompose;
use crate::spec::{Family, FormKind, HazardConfig, ModelSpec, Timescale, Transform};

/// Parameters of one hazard, on the internal (standardized covariate) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardParams {
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Frailty loading; only used by competing causes that share the frailty.
    pub alpha_frailty: f64,
    pub gamma0: Vec<f64>,
    pub tau: f64,
}

/// One point of the Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    /// Fixed effects per outcome. Centered entries are the means of the
    /// matching subject-specific coefficients.
    pub beta: Vec<Vec<f64>>,
    /// Residual sd for Gaussian outcomes, precision `φ` for beta outcomes.
    pub dispersion: Vec<f64>,
    pub d: DMatrix<f64>,
    pub hazards: Vec<HazardParams>,
    pub sigma_frailty: f64,
    /// Subject-specific coefficients, all outcomes stacked.
    pub re: Vec<Vec<f64>>,
    pub frailty: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub name: String,
    pub family: Family,
    pub fixed: DesignColumns,
    pub random: DesignColumns,
    /// Offset of this outcome's block within the stacked random effects.
    pub re_offset: usize,
    /// `(fixed column, random column)` pairs sharing a design term.
    pub centered: Vec<(usize, usize)>,
    /// Fixed columns without a random counterpart.
    pub noncentered: Vec<usize>,
}

impl OutcomeModel {
    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    pub fn n_random(&self) -> usize {
        self.random.len()
    }
}

/// How the shared frailty enters a hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrailtyRole {
    Absent,
    /// Coefficient fixed at one (the recurrent process).
    Unit,
    /// Free loading `α^υ` (a competing cause).
    Scaled,
}

/// One trajectory summary a hazard needs: `which` derivative of outcome
/// `outcome`'s linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EtaInput {
    pub outcome: usize,
    pub which: Derivative,
    /// Offset of this input's design values within a point's design slice.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FormSlot {
    pub main: usize,
    pub slope: Option<usize>,
    pub transform: Transform,
    pub alpha_offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct HazardModel {
    pub config: HazardConfig,
    pub recurrent: bool,
    pub timescale: Timescale,
    pub basis: SplineBasis,
    pub penalty: PenaltyMatrix,
    pub penalty_logdet: f64,
    pub forms: Vec<BoundForm>,
    pub slots: Vec<FormSlot>,
    pub inputs: Vec<EtaInput>,
    /// Design values per point, summed over inputs.
    pub input_width: usize,
    pub cov_mean: Vec<f64>,
    pub cov_sd: Vec<f64>,
    pub frailty: FrailtyRole,
    pub alpha_labels: Vec<String>,
}

impl HazardModel {
    pub fn n_gamma(&self) -> usize {
        self.cov_mean.len()
    }

    pub fn n_alpha(&self) -> usize {
        self.alpha_labels.len()
    }

    pub fn q(&self) -> usize {
        self.basis.len()
    }

    /// Length of the stacked vector `(γ, α, α^υ, γ0)`.
    pub fn theta_len(&self) -> usize {
        self.n_gamma() + self.n_alpha() + usize::from(self.frailty == FrailtyRole::Scaled) + self.q()
    }

    pub fn theta(&self, p: &HazardParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.theta_len());
        out.extend_from_slice(&p.gamma);
        out.extend_from_slice(&p.alpha);
        if self.frailty == FrailtyRole::Scaled {
            out.push(p.alpha_frailty);
        }
        out.extend_from_slice(&p.gamma0);
        out
    }

    pub fn set_theta(&self, p: &mut HazardParams, theta: &[f64]) {
        let (g, rest) = theta.split_at(self.n_gamma());
        let (a, rest) = rest.split_at(self.n_alpha());
        p.gamma.copy_from_slice(g);
        p.alpha.copy_from_slice(a);
        let rest = if self.frailty == FrailtyRole::Scaled {
            p.alpha_frailty = rest[0];
            &rest[1..]
        } else {
            rest
        };
        p.gamma0.copy_from_slice(rest);
    }

    /// Ranges of `γ`, `α`, `α^υ` and `γ0` within the stacked vector.
    pub fn theta_ranges(&self) -> [std::ops::Range<usize>; 4] {
        let g = self.n_gamma();
        let a = g + self.n_alpha();
        let u = a + usize::from(self.frailty == FrailtyRole::Scaled);
        [0..g, g..a, a..u, u..u + self.q()]
    }

    pub fn frailty_coef(&self, p: &HazardParams) -> f64 {
        match self.frailty {
            FrailtyRole::Absent => 0.0,
            FrailtyRole::Unit => 1.0,
            FrailtyRole::Scaled => p.alpha_frailty,
        }
    }

    fn standardize(&self, w: &[f64]) -> Vec<f64> {
        w.iter().enumerate().map(|(c, v)| (v - self.cov_mean[c]) / self.cov_sd[c]).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ObsBlock {
    pub time: Vec<f64>,
    pub y: Vec<f64>,
    pub ln_y: Vec<f64>,
    pub ln_1my: Vec<f64>,
    /// Rows of the non-centered fixed design, row-major.
    pub xnc: Vec<f64>,
    /// Rows of the random design, row-major.
    pub z: Vec<f64>,
}

impl ObsBlock {
    pub fn len(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HazInterval {
    pub event: bool,
    /// Standardized covariates.
    pub w: Vec<f64>,
    pub nodes: std::ops::Range<usize>,
    pub event_point: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct HazSubject {
    pub intervals: Vec<HazInterval>,
    pub weight: Vec<f64>,
    pub basis: Vec<BasisRow>,
    pub design: Vec<f64>,
}

impl HazSubject {
    pub fn n_points(&self) -> usize {
        self.basis.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SubjectData {
    pub obs: Vec<ObsBlock>,
    pub haz: Vec<HazSubject>,
}

/// Cached per-interval quantities: `∫ exp(γ0ᵀB + αᵀf)` over the interval
/// and the same linear predictor at the event time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IvCache {
    pub integral: f64,
    pub lin_event: f64,
}

/// Likelihood caches of one subject under the current state.
#[derive(Debug, Clone, Default)]
pub struct SubjectCache {
    pub eta_obs: Vec<Vec<f64>>,
    pub long_ll: Vec<f64>,
    /// Per hazard, `points × n_alpha` form features.
    pub feats: Vec<Vec<f64>>,
    pub ivs: Vec<Vec<IvCache>>,
    pub haz_ll: Vec<f64>,
}

impl SubjectCache {
    pub fn total(&self) -> f64 {
        self.long_ll.iter().sum::<f64>() + self.haz_ll.iter().sum::<f64>()
    }
}

/// A group of parameters updated together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Beta(usize),
    Dispersion(usize),
    D,
    RandomEffects(usize),
    Frailty(usize),
    FrailtyScale,
    Gamma(usize),
    Alpha(usize),
    AlphaFrailty(usize),
    Gamma0(usize),
    Tau(usize),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Beta(j) => write!(f, "beta[{j}]"),
            Block::Dispersion(j) => write!(f, "dispersion[{j}]"),
            Block::D => write!(f, "D"),
            Block::RandomEffects(i) => write!(f, "b[{i}]"),
            Block::Frailty(i) => write!(f, "frailty[{i}]"),
            Block::FrailtyScale => write!(f, "sigma_frailty"),
            Block::Gamma(h) => write!(f, "gamma[{h}]"),
            Block::Alpha(h) => write!(f, "alpha[{h}]"),
            Block::AlphaFrailty(h) => write!(f, "alpha_frailty[{h}]"),
            Block::Gamma0(h) => write!(f, "gamma0[{h}]"),
            Block::Tau(h) => write!(f, "tau[{h}]"),
        }
    }
}

/// The joint model compiled against a dataset.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub subjects: Vec<String>,
    pub outcomes: Vec<OutcomeModel>,
    pub hazards: Vec<HazardModel>,
    pub n_re: usize,
    pub re_names: Vec<String>,
    pub(crate) data: Vec<SubjectData>,
    pub(crate) views: DesignViews,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let m = values.clone().sum::<f64>() / n as f64;
    let v = values.map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    let sd = v.sqrt();
    (m, if sd > 1e-12 { sd } else { 1.0 })
}

impl Model {
    /// Validates the data against the model and compiles it.
    pub fn from_data(long: &LongitudinalDataset, surv: &SurvivalDataset, spec: &ModelSpec) -> Result<Self> {
        spec.check()?;
        validate(long, surv, spec).into_result()?;
        let views = build_design_views(long, surv, spec)?;
        Self::new(spec.clone(), views)
    }

    pub fn new(spec: ModelSpec, views: DesignViews) -> Result<Self> {
        spec.check()?;
        spec.priors.validate()?;
        let n = views.n_subjects();
        let mut outcomes = Vec::new();
        let mut re_names = Vec::new();
        let mut re_offset = 0;
        for o in &spec.outcomes {
            let fixed = DesignColumns::compile(&o.fixed, &views.baseline_names)?;
            let random = DesignColumns::compile(&o.random, &views.baseline_names)?;
            let mut centered = Vec::new();
            for (r, rn) in random.names().iter().enumerate() {
                if let Some(c) = fixed.names().iter().position(|f| f == rn) {
                    centered.push((c, r));
                }
                re_names.push(format!("{}:{rn}", o.name));
            }
            let noncentered = (0..fixed.len()).filter(|c| !centered.iter().any(|p| p.0 == *c)).collect();
            let nr = random.len();
            outcomes.push(OutcomeModel {
                name: o.name.clone(),
                family: o.family,
                fixed,
                random,
                re_offset,
                centered,
                noncentered,
            });
            re_offset += nr;
        }
        let n_re = re_offset;

        let mut data: Vec<SubjectData> = (0..n)
            .map(|_| SubjectData {
                obs: vec![ObsBlock::default(); outcomes.len()],
                haz: vec![HazSubject::default(); spec.hazards.len()],
            })
            .collect();
        for (j, view) in views.outcomes.iter().enumerate() {
            let om = &outcomes[j];
            for r in 0..view.y.len() {
                let ob = &mut data[view.subject[r]].obs[j];
                let y = view.y[r];
                ob.time.push(view.time[r]);
                ob.y.push(y);
                if om.family == Family::Beta {
                    if !(y > 0.0 && y < 1.0) {
                        return Err(JmError::OutOfRange(y, 0.0, 1.0));
                    }
                    ob.ln_y.push(y.ln());
                    ob.ln_1my.push((1.0 - y).ln());
                }
                for &c in &om.noncentered {
                    ob.xnc.push(view.x[(r, c)]);
                }
                for c in 0..om.n_random() {
                    ob.z.push(view.z[(r, c)]);
                }
            }
        }

        let has_frailty = spec.has_frailty();
        let mut hazards = Vec::new();
        for (h, cfg) in spec.hazards.iter().enumerate() {
            let view = &views.hazards[h];
            let recurrent = cfg.is_recurrent();
            let timescale = if recurrent { spec.timescale } else { Timescale::Calendar };
            let hi = view
                .rows
                .iter()
                .map(|r| match timescale {
                    Timescale::Gap => r.tstop - r.tstart,
                    Timescale::Calendar => r.tstop,
                })
                .fold(0.0, f64::max);
            let hi = if hi > 0.0 { hi } else { 1.0 };
            let basis = SplineBasis::uniform(0.0, hi, spec.spline.q, spec.spline.degree)?;
            let penalty = difference_penalty(spec.spline.q, spec.spline.order, spec.spline.ridge)?;
            let penalty_logdet = penalty.log_det()?;
            let nc = cfg.covariates.len();
            let (mut cov_mean, mut cov_sd) = (vec![0.0; nc], vec![1.0; nc]);
            if spec.standardize {
                for c in 0..nc {
                    let (m, s) = mean_sd(view.rows.iter().map(move |r| r.w[c]));
                    cov_mean[c] = m;
                    cov_sd[c] = s;
                }
            }
            let frailty = match (has_frailty, recurrent, cfg.frailty) {
                (true, true, _) => FrailtyRole::Unit,
                (true, false, true) => FrailtyRole::Scaled,
                _ => FrailtyRole::Absent,
            };
            let mut forms = Vec::new();
            let mut inputs: Vec<EtaInput> = Vec::new();
            let mut slots = Vec::new();
            let mut width = 0;
            let mut alpha_offset = 0;
            let mut input_for = |outcome: usize, which: Derivative, inputs: &mut Vec<EtaInput>| {
                if let Some(k) = inputs.iter().position(|e| e.outcome == outcome && e.which == which) {
                    return k;
                }
                let om = &outcomes[outcome];
                inputs.push(EtaInput { outcome, which, offset: width });
                width += om.n_random() + om.noncentered.len();
                inputs.len() - 1
            };
            for f in &cfg.forms {
                let outcome = spec.outcome_index(&f.outcome).ok_or_else(|| invalid(format!("unknown outcome {}", f.outcome)))?;
                let (main, slope) = match (f.kind, f.transform) {
                    (FormKind::Value, _) => (input_for(outcome, Derivative::Value, &mut inputs), None),
                    (FormKind::Slope, Transform::Dexp | Transform::Dexpit) => (
                        input_for(outcome, Derivative::Value, &mut inputs),
                        Some(input_for(outcome, Derivative::First, &mut inputs)),
                    ),
                    (FormKind::Slope, _) => (input_for(outcome, Derivative::First, &mut inputs), None),
                    (FormKind::Acceleration, _) => (input_for(outcome, Derivative::Second, &mut inputs), None),
                    (FormKind::Area, _) => (input_for(outcome, Derivative::Integral, &mut inputs), None),
                };
                slots.push(FormSlot { main, slope, transform: f.transform, alpha_offset, width: f.width() });
                alpha_offset += f.width();
                forms.push(BoundForm { form: f.clone(), outcome });
            }
            hazards.push(HazardModel {
                config: cfg.clone(),
                recurrent,
                timescale,
                basis,
                penalty,
                penalty_logdet,
                forms,
                slots,
                inputs,
                input_width: width,
                cov_mean,
                cov_sd,
                frailty,
                alpha_labels: cfg.alpha_labels(),
            });
        }

        for (h, hm) in hazards.iter().enumerate() {
            let breaks = hm.basis.interior_breaks();
            for row in &views.hazards[h].rows {
                let hs = &mut data[row.subject].haz[h];
                let cov = &views.baseline[row.subject];
                let shift = match hm.timescale {
                    Timescale::Gap => row.tstart,
                    Timescale::Calendar => 0.0,
                };
                let shifted: Vec<f64> = breaks.iter().map(|k| k + shift).collect();
                let first = hs.n_points();
                let (lo, hi) = hm.basis.range();
                let push_point = |hs: &mut HazSubject, t: f64, w: f64| -> Result<()> {
                    let s = (t - shift).clamp(lo, hi);
                    hs.basis.push(hm.basis.eval_row(s)?);
                    hs.weight.push(w);
                    let start = hs.design.len();
                    hs.design.resize(start + hm.input_width, 0.0);
                    for inp in &hm.inputs {
                        let om = &outcomes[inp.outcome];
                        let out = &mut hs.design[start + inp.offset..];
                        let z = om.random.eval(t, cov, inp.which);
                        let x = om.fixed.eval(t, cov, inp.which);
                        let scale = if inp.which == Derivative::Integral { 1.0 / t } else { 1.0 };
                        for (r, v) in z.iter().enumerate() {
                            out[r] = v * scale;
                        }
                        for (c, &col) in om.noncentered.iter().enumerate() {
                            out[om.n_random() + c] = x[col] * scale;
                        }
                    }
                    Ok(())
                };
                for (a, b) in split_interval(row.tstart, row.tstop, &shifted) {
                    for (t, w) in gk15_points(a, b) {
                        push_point(hs, t, w)?;
                    }
                }
                let last = hs.n_points();
                let event_point = if row.status {
                    push_point(hs, row.tstop, 0.0)?;
                    Some(last)
                } else {
                    None
                };
                hs.intervals.push(HazInterval {
                    event: row.status,
                    w: hm.standardize(&row.w),
                    nodes: first..last,
                    event_point,
                });
            }
        }

        Ok(Self { spec, subjects: views.subjects.clone(), outcomes, hazards, n_re, re_names, data, views })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn views(&self) -> &DesignViews {
        &self.views
    }

    pub fn has_frailty(&self) -> bool {
        self.spec.has_frailty()
    }

    pub fn n_obs(&self, outcome: usize) -> usize {
        self.data.iter().map(|d| d.obs[outcome].len()).sum()
    }

    /// Number of risk intervals and events of hazard `h` for subject `i`.
    pub fn interval_count(&self, h: usize, i: usize) -> (usize, usize) {
        let ivs = &self.data[i].haz[h].intervals;
        (ivs.len(), ivs.iter().filter(|iv| iv.event).count())
    }

    /// Means of the stacked random effects implied by `beta`.
    pub fn re_mean(&self, beta: &[Vec<f64>]) -> Vec<f64> {
        let mut m = vec![0.0; self.n_re];
        for (j, om) in self.outcomes.iter().enumerate() {
            for &(c, r) in &om.centered {
                m[om.re_offset + r] = beta[j][c];
            }
        }
        m
    }

    pub fn outcome_re<'a>(&self, j: usize, re: &'a [f64]) -> &'a [f64] {
        let om = &self.outcomes[j];
        &re[om.re_offset..om.re_offset + om.n_random()]
    }

    /// Linear predictors at subject `i`'s observations of outcome `j`.
    pub(crate) fn eta_obs(&self, j: usize, i: usize, beta: &[f64], re: &[f64]) -> Vec<f64> {
        let om = &self.outcomes[j];
        let ob = &self.data[i].obs[j];
        let (nr, nnc) = (om.n_random(), om.noncentered.len());
        let b = self.outcome_re(j, re);
        (0..ob.len())
            .map(|r| {
                let mut eta = dot(&ob.z[r * nr..(r + 1) * nr], b);
                for (c, &col) in om.noncentered.iter().enumerate() {
                    eta += ob.xnc[r * nnc + c] * beta[col];
                }
                eta
            })
            .collect()
    }

    pub(crate) fn long_ll(&self, j: usize, i: usize, eta: &[f64], disp: f64) -> f64 {
        let ob = &self.data[i].obs[j];
        if !(disp > 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut ll = 0.0;
        match self.outcomes[j].family {
            Family::Gaussian => {
                let inv = 1.0 / disp;
                let c = ob.len() as f64 * (-0.5 * LN_2PI - disp.ln());
                for (y, e) in ob.y.iter().zip(eta) {
                    let z = (y - e) * inv;
                    ll -= 0.5 * z * z;
                }
                ll += c;
            }
            Family::Beta => {
                for r in 0..ob.len() {
                    let mu = expit(eta[r]);
                    ll += beta_loglik_unchecked(ob.ln_y[r], ob.ln_1my[r], mu, disp);
                }
            }
        }
        if ll.is_nan() {
            f64::NEG_INFINITY
        } else {
            ll
        }
    }

    /// Form features of hazard `h` at every point of subject `i`;
    /// `None` when a transform is undefined somewhere.
    pub(crate) fn features(&self, h: usize, i: usize, beta: &[Vec<f64>], re: &[f64]) -> Option<Vec<f64>> {
        let hm = &self.hazards[h];
        let hs = &self.data[i].haz[h];
        let na = hm.n_alpha();
        if na == 0 {
            return Some(Vec::new());
        }
        let np = hs.n_points();
        let mut out = vec![0.0; np * na];
        let mut eta = vec![0.0; hm.inputs.len()];
        for p in 0..np {
            let d = &hs.design[p * hm.input_width..(p + 1) * hm.input_width];
            for (k, inp) in hm.inputs.iter().enumerate() {
                let om = &self.outcomes[inp.outcome];
                let nr = om.n_random();
                let slice = &d[inp.offset..inp.offset + nr + om.noncentered.len()];
                let mut v = dot(&slice[..nr], self.outcome_re(inp.outcome, re));
                for (c, &col) in om.noncentered.iter().enumerate() {
                    v += slice[nr + c] * beta[inp.outcome][col];
                }
                eta[k] = v;
            }
            let f = &mut out[p * na..(p + 1) * na];
            for s in &hm.slots {
                let slope = s.slope.map_or(0.0, |k| eta[k]);
                if !apply_transform(s.transform, eta[s.main], slope, &mut f[s.alpha_offset..s.alpha_offset + s.width]) {
                    return None;
                }
            }
        }
        Some(out)
    }

    /// Interval integrals and event predictors of hazard `h`, without the
    /// covariate and frailty terms.
    pub(crate) fn intervals(&self, h: usize, i: usize, gamma0: &[f64], alpha: &[f64], feats: &[f64]) -> Vec<IvCache> {
        let hs = &self.data[i].haz[h];
        let na = alpha.len();
        let lin = |p: usize| {
            let mut v = hs.basis[p].dot(gamma0);
            if na > 0 {
                v += dot(&feats[p * na..(p + 1) * na], alpha);
            }
            v
        };
        hs.intervals
            .iter()
            .map(|iv| {
                let mut integral = 0.0;
                for p in iv.nodes.clone() {
                    integral += hs.weight[p] * lin(p).exp();
                }
                IvCache { integral, lin_event: iv.event_point.map_or(0.0, lin) }
            })
            .collect()
    }

    pub(crate) fn hazard_ll(&self, h: usize, i: usize, ivs: &[IvCache], gamma: &[f64], coef: f64, frailty: f64) -> f64 {
        let hs = &self.data[i].haz[h];
        let mut ll = 0.0;
        for (iv, c) in hs.intervals.iter().zip(ivs) {
            let lp = dot(&iv.w, gamma) + coef * frailty;
            if iv.event {
                ll += c.lin_event + lp;
            }
            ll -= lp.exp() * c.integral;
        }
        if ll.is_nan() {
            f64::NEG_INFINITY
        } else {
            ll
        }
    }

    /// Builds subject `i`'s caches from scratch.
    pub fn subject_cache(&self, i: usize, state: &ParameterState) -> SubjectCache {
        self.subject_cache_with(i, state, &state.re[i])
    }

    /// Subject `i`'s caches with its coefficients replaced by `re`; reads
    /// nothing else from `state.re`.
    pub(crate) fn subject_cache_with(&self, i: usize, state: &ParameterState, re: &[f64]) -> SubjectCache {
        let mut c = SubjectCache::default();
        for j in 0..self.outcomes.len() {
            let eta = self.eta_obs(j, i, &state.beta[j], re);
            c.long_ll.push(self.long_ll(j, i, &eta, state.dispersion[j]));
            c.eta_obs.push(eta);
        }
        for (h, hm) in self.hazards.iter().enumerate() {
            let p = &state.hazards[h];
            match self.features(h, i, &state.beta, re) {
                Some(f) => {
                    let ivs = self.intervals(h, i, &p.gamma0, &p.alpha, &f);
                    c.haz_ll.push(self.hazard_ll(h, i, &ivs, &p.gamma, hm.frailty_coef(p), frailty_of(state, i)));
                    c.ivs.push(ivs);
                    c.feats.push(f);
                }
                None => {
                    c.haz_ll.push(f64::NEG_INFINITY);
                    c.ivs.push(vec![IvCache::default(); self.data[i].haz[h].intervals.len()]);
                    c.feats.push(Vec::new());
                }
            }
        }
        c
    }

    /// Expected information of subject `i`'s random effects from the
    /// longitudinal likelihood, evaluated at the cached predictors.
    pub(crate) fn re_information(&self, i: usize, state: &ParameterState, cache: &SubjectCache) -> DMatrix<f64> {
        let mut info = DMatrix::zeros(self.n_re, self.n_re);
        for (j, om) in self.outcomes.iter().enumerate() {
            let ob = &self.data[i].obs[j];
            let nr = om.n_random();
            let disp = state.dispersion[j];
            for r in 0..ob.len() {
                let w = match om.family {
                    Family::Gaussian => 1.0 / (disp * disp),
                    Family::Beta => beta_fisher_eta(expit(cache.eta_obs[j][r]), disp),
                };
                let z = &ob.z[r * nr..(r + 1) * nr];
                for a in 0..nr {
                    for b in 0..nr {
                        info[(om.re_offset + a, om.re_offset + b)] += w * z[a] * z[b];
                    }
                }
            }
        }
        info
    }

    /// Observed information of the data part of hazard `h` in
    /// `(γ, α, α^υ, γ0)`: `Σ w h(t) x xᵀ` over quadrature nodes.
    pub(crate) fn hazard_information(&self, h: usize, state: &ParameterState, caches: &[SubjectCache]) -> DMatrix<f64> {
        let hm = &self.hazards[h];
        let p = &state.hazards[h];
        let d = hm.theta_len();
        let [rg, ra, ru, r0] = hm.theta_ranges();
        let na = hm.n_alpha();
        let coef = hm.frailty_coef(p);
        let mut info = DMatrix::zeros(d, d);
        let mut x = vec![0.0; d];
        for (i, cache) in caches.iter().enumerate() {
            let hs = &self.data[i].haz[h];
            let u = frailty_of(state, i);
            for iv in &hs.intervals {
                let lp = dot(&iv.w, &p.gamma) + coef * u;
                x[rg.clone()].copy_from_slice(&iv.w);
                if !ru.is_empty() {
                    x[ru.start] = u;
                }
                for pt in iv.nodes.clone() {
                    let br = &hs.basis[pt];
                    let f = if na > 0 { &cache.feats[h][pt * na..(pt + 1) * na] } else { &[][..] };
                    let mut lin = br.dot(&p.gamma0) + lp;
                    if na > 0 {
                        lin += dot(f, &p.alpha);
                    }
                    let wt = hs.weight[pt] * lin.exp();
                    if !wt.is_finite() {
                        continue;
                    }
                    x[ra.clone()].copy_from_slice(f);
                    for v in &mut x[r0.clone()] {
                        *v = 0.0;
                    }
                    for k in 0..br.len {
                        x[r0.start + br.start + k] = br.values[k];
                    }
                    for a in 0..d {
                        if x[a] == 0.0 {
                            continue;
                        }
                        let s = wt * x[a];
                        for b in 0..=a {
                            info[(a, b)] += s * x[b];
                        }
                    }
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        info
    }

    /// Log prior of the whole state.
    pub fn log_prior(&self, state: &ParameterState) -> f64 {
        let mut lp = 0.0;
        for j in 0..self.outcomes.len() {
            lp += self.beta_prior(state, j) + self.dispersion_prior(state, j);
        }
        lp += self.d_prior(&state.d);
        for h in 0..self.hazards.len() {
            lp += self.hazard_prior(state, h, Block::Gamma(h))
                + self.hazard_prior(state, h, Block::Alpha(h))
                + self.hazard_prior(state, h, Block::AlphaFrailty(h))
                + self.hazard_prior(state, h, Block::Gamma0(h))
                + self.tau_prior(state, h);
        }
        if self.has_frailty() {
            lp += self.spec.priors.sigma_frailty.logpdf(state.sigma_frailty);
        }
        lp
    }

    pub(crate) fn beta_prior(&self, state: &ParameterState, j: usize) -> f64 {
        state.beta[j].iter().map(|&b| self.spec.priors.beta.logpdf(b)).sum()
    }

    pub(crate) fn dispersion_prior(&self, state: &ParameterState, j: usize) -> f64 {
        let pr = &self.spec.priors;
        match self.outcomes[j].family {
            Family::Gaussian => pr.sigma_y.logpdf(state.dispersion[j]),
            Family::Beta => pr.phi.logpdf(state.dispersion[j]),
        }
    }

    /// Gamma priors on the standard deviations and LKJ on the correlation.
    pub fn d_prior(&self, d: &DMatrix<f64>) -> f64 {
        if d.nrows() == 0 {
            return 0.0;
        }
        match decompose(d) {
            Ok((sd, l)) => {
                sd.iter().map(|&s| self.spec.priors.re_sd.logpdf(s)).sum::<f64>()
                    + lkj_logpdf(&l, self.spec.priors.lkj_eta)
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Prior of one of the `γ`, `α`, `α^υ`, `γ0 | τ` groups of hazard `h`.
    pub(crate) fn hazard_prior(&self, state: &ParameterState, h: usize, which: Block) -> f64 {
        let pr = &self.spec.priors;
        let p = &state.hazards[h];
        let hm = &self.hazards[h];
        match which {
            Block::Gamma(_) => p.gamma.iter().map(|&g| pr.gamma.logpdf(g)).sum(),
            Block::Alpha(_) => p.alpha.iter().map(|&a| pr.alpha.logpdf(a)).sum(),
            Block::AlphaFrailty(_) if hm.frailty == FrailtyRole::Scaled => pr.alpha_frailty.logpdf(p.alpha_frailty),
            Block::Gamma0(_) => penalized_normal_logpdf(&p.gamma0, p.tau, &hm.penalty, hm.penalty_logdet),
            _ => 0.0,
        }
    }

    pub(crate) fn tau_prior(&self, state: &ParameterState, h: usize) -> f64 {
        self.spec.priors.tau.logpdf(state.hazards[h].tau)
    }

    pub(crate) fn frailty_logdensity(&self, u: f64, sigma: f64) -> f64 {
        if !(sigma > 0.0) {
            return f64::NEG_INFINITY;
        }
        let z = u / sigma;
        -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
    }

    /// Log density of subject `i`'s coefficients under `N(mean, D)`.
    pub(crate) fn re_logdensity(&self, re: &[f64], mean: &[f64], d_chol: &DMatrix<f64>) -> f64 {
        if self.n_re == 0 {
            return 0.0;
        }
        let dev: Vec<f64> = re.iter().zip(mean).map(|(a, b)| a - b).collect();
        mvn_logdensity_chol(&dev, d_chol)
    }

    /// Resolves a block name such as `beta[y1]`, `b[7]`, `gamma0[CR1]` or
    /// `sigma_frailty`.
    pub fn parse_block(&self, name: &str) -> Result<Block> {
        let unknown = || JmError::UnknownBlock(name.to_string());
        match name {
            "D" if self.n_re > 0 => return Ok(Block::D),
            "sigma_frailty" if self.has_frailty() => return Ok(Block::FrailtyScale),
            _ => {}
        }
        let (head, arg) = name
            .strip_suffix(']')
            .and_then(|s| s.split_once('['))
            .ok_or_else(unknown)?;
        let outcome = || self.spec.outcome_index(arg).or_else(|| arg.parse().ok().filter(|&j| j < self.outcomes.len()));
        let hazard = || self.spec.hazard_index(arg).or_else(|| arg.parse().ok().filter(|&h| h < self.hazards.len()));
        let subject = || {
            self.subjects
                .iter()
                .position(|s| s == arg)
                .or_else(|| arg.parse().ok().filter(|&i| i < self.n_subjects()))
        };
        let block = match head {
            "beta" => outcome().map(Block::Beta),
            "dispersion" => outcome().map(Block::Dispersion),
            "b" if self.n_re > 0 => subject().map(Block::RandomEffects),
            "frailty" if self.has_frailty() => subject().map(Block::Frailty),
            "gamma" => hazard().map(Block::Gamma),
            "alpha" => hazard().map(Block::Alpha),
            "alpha_frailty" => hazard().filter(|&h| self.hazards[h].frailty == FrailtyRole::Scaled).map(Block::AlphaFrailty),
            "gamma0" => hazard().map(Block::Gamma0),
            "tau" => hazard().map(Block::Tau),
            _ => None,
        };
        block.ok_or_else(unknown)
    }

    fn check_state(&self, state: &ParameterState) -> Result<()> {
        let n = self.n_subjects();
        let dim = |expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(JmError::Dimension { expected, found })
            }
        };
        dim(self.outcomes.len(), state.beta.len())?;
        dim(self.outcomes.len(), state.dispersion.len())?;
        for (j, om) in self.outcomes.iter().enumerate() {
            dim(om.n_fixed(), state.beta[j].len())?;
        }
        dim(self.n_re, state.d.nrows())?;
        dim(self.n_re, state.d.ncols())?;
        dim(self.hazards.len(), state.hazards.len())?;
        for (hm, p) in self.hazards.iter().zip(&state.hazards) {
            dim(hm.n_gamma(), p.gamma.len())?;
            dim(hm.n_alpha(), p.alpha.len())?;
            dim(hm.q(), p.gamma0.len())?;
        }
        dim(n, state.re.len())?;
        for r in &state.re {
            dim(self.n_re, r.len())?;
        }
        if self.has_frailty() {
            dim(n, state.frailty.len())?;
        }
        Ok(())
    }

    /// Unnormalized log posterior computed directly from the closure-based
    /// likelihood functions, without any caching.
    pub fn reference_log_posterior(&self, state: &ParameterState) -> Result<f64> {
        self.check_state(state)?;
        let mut lp = self.log_prior(state);
        let views = &self.views;
        let re_mean = self.re_mean(&state.beta);
        // fixed effects with centered entries removed: those live in `re`
        let beta_eff: Vec<Vec<f64>> = self
            .outcomes
            .iter()
            .enumerate()
            .map(|(j, om)| {
                let mut b = state.beta[j].clone();
                for &(c, _) in &om.centered {
                    b[c] = 0.0;
                }
                b
            })
            .collect();

        for (j, view) in views.outcomes.iter().enumerate() {
            let om = &self.outcomes[j];
            for r in 0..view.y.len() {
                let i = view.subject[r];
                let x: Vec<f64> = view.x.row(r).iter().copied().collect();
                let z: Vec<f64> = view.z.row(r).iter().copied().collect();
                let eta = dot(&x, &beta_eff[j]) + dot(&z, self.outcome_re(j, &state.re[i]));
                lp += match om.family {
                    Family::Gaussian => gaussian_loglik(view.y[r], eta, state.dispersion[j]),
                    Family::Beta => beta_loglik(view.y[r], expit(eta), state.dispersion[j])?,
                };
            }
        }

        if self.n_re > 0 {
            let d = &state.d;
            for re in &state.re {
                let dev: Vec<f64> = re.iter().zip(&re_mean).map(|(a, b)| a - b).collect();
                lp += crate::longitudinal::random_effects_logdensity(&dev, d)?;
            }
        }
        if self.has_frailty() {
            for &u in &state.frailty {
                lp += self.frailty_logdensity(u, state.sigma_frailty);
            }
        }

        let specs: Vec<HazardSpec> = self
            .hazards
            .iter()
            .zip(&state.hazards)
            .map(|(hm, p)| HazardSpec {
                stratum: hm.config.stratum.clone(),
                basis: hm.basis.clone(),
                gamma0: p.gamma0.clone(),
                gamma: p.gamma.clone(),
                forms: hm.forms.clone(),
                alpha: p.alpha.clone(),
                frailty_coef: hm.frailty_coef(p),
                timescale: hm.timescale,
            })
            .collect();
        for i in 0..self.n_subjects() {
            let cov = &views.baseline[i];
            let trajs: Vec<DesignTrajectory> = self
                .outcomes
                .iter()
                .enumerate()
                .map(|(j, om)| DesignTrajectory {
                    fixed: &om.fixed,
                    beta: &beta_eff[j],
                    random: &om.random,
                    b: self.outcome_re(j, &state.re[i]),
                    covariates: cov,
                })
                .collect();
            let subj = SubjectInput {
                trajectories: trajs.iter().map(|t| t as &dyn Trajectory).collect(),
                frailty: frailty_of(state, i),
            };
            for (h, hm) in self.hazards.iter().enumerate() {
                let rows = views.hazards[h].rows.iter().filter(|r| r.subject == i);
                if hm.recurrent {
                    let ivs: Vec<RiskInterval> = rows
                        .map(|r| RiskInterval { tstart: r.tstart, tstop: r.tstop, event: r.status, w: hm.standardize(&r.w) })
                        .collect();
                    lp += recurrent_loglik(&specs[h], &ivs, &subj)?;
                } else {
                    for r in rows {
                        let rec = TerminalRecord {
                            tstart: r.tstart,
                            tstop: r.tstop,
                            cause: r.status.then_some(0),
                            w: vec![hm.standardize(&r.w)],
                        };
                        lp += terminal_loglik(std::slice::from_ref(&specs[h]), &rec, &subj)?;
                    }
                }
            }
        }
        Ok(lp)
    }

    /// Coefficient names in reporting order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for om in &self.outcomes {
            for f in om.fixed.names() {
                names.push(format!("beta_{}[{f}]", om.name));
            }
            names.push(match om.family {
                Family::Gaussian => format!("sigma_{}", om.name),
                Family::Beta => format!("phi_{}", om.name),
            });
        }
        for a in 0..self.n_re {
            for b in 0..=a {
                names.push(format!("D[{},{}]", self.re_names[a], self.re_names[b]));
            }
        }
        for hm in &self.hazards {
            let s = &hm.config.stratum;
            for c in &hm.config.covariates {
                names.push(format!("gamma_{s}[{c}]"));
            }
            for a in &hm.alpha_labels {
                names.push(format!("alpha_{s}[{a}]"));
            }
            if hm.frailty == FrailtyRole::Scaled {
                names.push(format!("alpha_frailty_{s}"));
            }
            for k in 0..hm.q() {
                names.push(format!("gamma0_{s}[{}]", k + 1));
            }
            names.push(format!("tau_{s}"));
        }
        if self.has_frailty() {
            names.push("sigma_frailty".to_string());
        }
        names
    }

    /// Values matching [`Model::parameter_names`], with survival covariate
    /// effects and baselines mapped back to the original covariate scale.
    pub fn named_values(&self, state: &ParameterState) -> Vec<f64> {
        let mut out = Vec::new();
        for (j, _) in self.outcomes.iter().enumerate() {
            out.extend_from_slice(&state.beta[j]);
            out.push(state.dispersion[j]);
        }
        for a in 0..self.n_re {
            for b in 0..=a {
                out.push(state.d[(a, b)]);
            }
        }
        for (hm, p) in self.hazards.iter().zip(&state.hazards) {
            let gamma: Vec<f64> = p.gamma.iter().zip(&hm.cov_sd).map(|(g, s)| g / s).collect();
            let shift: f64 = gamma.iter().zip(&hm.cov_mean).map(|(g, m)| g * m).sum();
            out.extend_from_slice(&gamma);
            out.extend_from_slice(&p.alpha);
            if hm.frailty == FrailtyRole::Scaled {
                out.push(p.alpha_frailty);
            }
            // B-splines sum to one, so a constant shift moves every coefficient
            out.extend(p.gamma0.iter().map(|g| g - shift));
            out.push(p.tau);
        }
        if self.has_frailty() {
            out.push(state.sigma_frailty);
        }
        out
    }

    /// Names of the structural parameters whose convergence is monitored:
    /// everything except baseline spline coefficients and smoothing
    /// precisions.
    pub fn monitored(&self) -> Vec<bool> {
        self.parameter_names().iter().map(|n| is_monitored(n)).collect()
    }
}

/// Whether a parameter of this name is monitored for convergence.
pub fn is_monitored(name: &str) -> bool {
    !(name.starts_with("gamma0_") || name.starts_with("tau_"))
}

pub(crate) fn frailty_of(state: &ParameterState, i: usize) -> f64 {
    state.frailty.get(i).copied().unwrap_or(0.0)
}

/// A state together with every subject's likelihood caches.
#[derive(Debug, Clone)]
pub struct Workspace<'m> {
    pub model: &'m Model,
    pub state: ParameterState,
    pub caches: Vec<SubjectCache>,
    pub(crate) d_chol: DMatrix<f64>,
    pub(crate) re_mean: Vec<f64>,
}

impl<'m> Workspace<'m> {
    pub fn new(model: &'m Model, state: ParameterState) -> Result<Self> {
        model.check_state(&state)?;
        let d_chol = if model.n_re > 0 {
            state
                .d
                .clone()
                .cholesky()
                .ok_or_else(|| numerical("random-effects covariance is not positive definite"))?
                .unpack()
        } else {
            DMatrix::zeros(0, 0)
        };
        let re_mean = model.re_mean(&state.beta);
        let caches = (0..model.n_subjects()).map(|i| model.subject_cache(i, &state)).collect();
        Ok(Self { model, state, caches, d_chol, re_mean })
    }

    pub(crate) fn refresh_d(&mut self) {
        if let Some(c) = self.state.d.clone().cholesky() {
            self.d_chol = c.unpack();
        }
    }

    pub(crate) fn refresh_mean(&mut self) {
        self.re_mean = self.model.re_mean(&self.state.beta);
    }

    pub fn re_logdensity(&self, i: usize) -> f64 {
        self.model.re_logdensity(&self.state.re[i], &self.re_mean, &self.d_chol)
    }

    pub fn log_likelihood(&self) -> f64 {
        self.caches.iter().map(SubjectCache::total).sum()
    }

    /// Full unnormalized log posterior from the caches.
    pub fn log_posterior(&self) -> f64 {
        let m = self.model;
        let mut lp = m.log_prior(&self.state) + self.log_likelihood();
        for i in 0..m.n_subjects() {
            lp += self.re_logdensity(i);
            if m.has_frailty() {
                lp += m.frailty_logdensity(self.state.frailty[i], self.state.sigma_frailty);
            }
        }
        lp
    }

    /// Sum over subjects of hazard `h`'s cached log-likelihood.
    pub fn hazard_total(&self, h: usize) -> f64 {
        self.caches.iter().map(|c| c.haz_ll[h]).sum()
    }

    /// The terms of the log posterior that involve `block`, from caches.
    pub fn conditional_logpost(&self, block: Block) -> f64 {
        let m = self.model;
        let s = &self.state;
        match block {
            Block::Beta(j) => {
                let om = &m.outcomes[j];
                let mut lp = m.beta_prior(s, j);
                if !om.centered.is_empty() {
                    lp += (0..m.n_subjects()).map(|i| self.re_logdensity(i)).sum::<f64>();
                }
                if !om.noncentered.is_empty() {
                    lp += self.caches.iter().map(|c| c.long_ll[j]).sum::<f64>();
                    for (h, hm) in m.hazards.iter().enumerate() {
                        if hm.forms.iter().any(|f| f.outcome == j) {
                            lp += self.hazard_total(h);
                        }
                    }
                }
                lp
            }
            Block::Dispersion(j) => m.dispersion_prior(s, j) + self.caches.iter().map(|c| c.long_ll[j]).sum::<f64>(),
            Block::D => m.d_prior(&s.d) + (0..m.n_subjects()).map(|i| self.re_logdensity(i)).sum::<f64>(),
            Block::RandomEffects(i) => self.re_logdensity(i) + self.caches[i].total(),
            Block::Frailty(i) => {
                m.frailty_logdensity(s.frailty[i], s.sigma_frailty)
                    + m.hazards
                        .iter()
                        .enumerate()
                        .filter(|(_, hm)| hm.frailty != FrailtyRole::Absent)
                        .map(|(h, _)| self.caches[i].haz_ll[h])
                        .sum::<f64>()
            }
            Block::FrailtyScale => {
                m.spec.priors.sigma_frailty.logpdf(s.sigma_frailty)
                    + s.frailty.iter().map(|&u| m.frailty_logdensity(u, s.sigma_frailty)).sum::<f64>()
            }
            Block::Gamma(h) | Block::Alpha(h) | Block::AlphaFrailty(h) | Block::Gamma0(h) => {
                m.hazard_prior(s, h, block) + self.hazard_total(h)
            }
            Block::Tau(h) => m.hazard_prior(s, h, Block::Gamma0(h)) + m.tau_prior(s, h),
        }
    }
}
