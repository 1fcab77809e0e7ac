//! Functional forms, log-hazards, cumulative hazards and survival
//! log-likelihood contributions.
//!
//! This module is the straightforward, closure-based implementation. The
//! sampler uses cached equivalents in [`crate::model`], which are checked
//! against these functions.

use crate::basis::{gauss_kronrod_15_split, Derivative, SplineBasis};
use crate::error::{invalid, numerical, JmError, Result};
use crate::longitudinal::{dot, expit, DesignColumns};
use crate::spec::{FormKind, FunctionalForm, Timescale, Transform};

/// A marker trajectory `η(t)` with its derivatives and running integral.
pub trait Trajectory {
    fn value(&self, t: f64) -> f64;
    fn slope(&self, t: f64) -> f64;
    fn acceleration(&self, t: f64) -> f64;
    /// `∫_0^t η(s) ds`
    fn integral(&self, t: f64) -> f64;
}

/// `η(t) = a + b t`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTrajectory {
    pub intercept: f64,
    pub slope: f64,
}

impl Trajectory for LinearTrajectory {
    fn value(&self, t: f64) -> f64 {
        self.intercept + self.slope * t
    }
    fn slope(&self, _t: f64) -> f64 {
        self.slope
    }
    fn acceleration(&self, _t: f64) -> f64 {
        0.0
    }
    fn integral(&self, t: f64) -> f64 {
        self.intercept * t + 0.5 * self.slope * t * t
    }
}

/// Subject trajectory `x(t)ᵀβ + z(t)ᵀb` from compiled design columns.
pub struct DesignTrajectory<'a> {
    pub fixed: &'a DesignColumns,
    pub beta: &'a [f64],
    pub random: &'a DesignColumns,
    pub b: &'a [f64],
    pub covariates: &'a [f64],
}

impl DesignTrajectory<'_> {
    fn eval(&self, t: f64, which: Derivative) -> f64 {
        dot(&self.fixed.eval(t, self.covariates, which), self.beta)
            + dot(&self.random.eval(t, self.covariates, which), self.b)
    }
}

impl Trajectory for DesignTrajectory<'_> {
    fn value(&self, t: f64) -> f64 {
        self.eval(t, Derivative::Value)
    }
    fn slope(&self, t: f64) -> f64 {
        self.eval(t, Derivative::First)
    }
    fn acceleration(&self, t: f64) -> f64 {
        self.eval(t, Derivative::Second)
    }
    fn integral(&self, t: f64) -> f64 {
        self.eval(t, Derivative::Integral)
    }
}

/// Applies a transform to the raw trajectory summaries. Writes
/// `transform.width()` features and returns `false` when the transform is
/// undefined at this point (e.g. the log of a nonpositive value).
#[inline]
pub(crate) fn apply_transform(transform: Transform, x: f64, slope: f64, out: &mut [f64]) -> bool {
    let v = match transform {
        Transform::Identity => x,
        Transform::Log | Transform::Log2 | Transform::Log10 | Transform::Sqrt if x <= 0.0 => {
            if transform == Transform::Sqrt && x == 0.0 {
                0.0
            } else {
                return false;
            }
        }
        Transform::Log => x.ln(),
        Transform::Log2 => x.log2(),
        Transform::Log10 => x.log10(),
        Transform::Sqrt => x.sqrt(),
        Transform::Exp => x.exp(),
        Transform::Expit => expit(x),
        Transform::Abs => x.abs(),
        // x is the value here and `slope` its derivative
        Transform::Dexp => x.exp() * slope,
        Transform::Dexpit => {
            let p = expit(x);
            p * (1.0 - p) * slope
        }
        Transform::Poly2 | Transform::Poly3 | Transform::Poly4 => {
            let mut p = x;
            for o in out.iter_mut() {
                *o = p;
                p *= x;
            }
            return x.is_finite();
        }
    };
    out[0] = v;
    v.is_finite()
}

/// Feature values of a functional form at time `t`. Polynomial transforms
/// return the powers `(η, η², …)`; every other transform returns one value.
pub fn eval_form(form: &FunctionalForm, traj: &dyn Trajectory, t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(invalid(format!("functional form evaluated at negative time {t}")));
    }
    let mut out = vec![0.0; form.width()];
    let ok = match form.kind {
        FormKind::Value => apply_transform(form.transform, traj.value(t), 0.0, &mut out),
        FormKind::Slope => match form.transform {
            Transform::Dexp | Transform::Dexpit => {
                apply_transform(form.transform, traj.value(t), traj.slope(t), &mut out)
            }
            tr => apply_transform(tr, traj.slope(t), 0.0, &mut out),
        },
        FormKind::Acceleration => apply_transform(form.transform, traj.acceleration(t), 0.0, &mut out),
        FormKind::Area => {
            if t == 0.0 {
                return Err(invalid("area form is undefined at t = 0"));
            }
            apply_transform(form.transform, traj.integral(t) / t, 0.0, &mut out)
        }
    };
    if !ok {
        return Err(numerical(format!("form {form} is undefined at t = {t}")));
    }
    Ok(out)
}

/// A form bound to the outcome whose trajectory it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundForm {
    pub form: FunctionalForm,
    pub outcome: usize,
}

/// Everything needed to evaluate one hazard.
#[derive(Debug, Clone)]
pub struct HazardSpec {
    pub stratum: String,
    pub basis: SplineBasis,
    pub gamma0: Vec<f64>,
    pub gamma: Vec<f64>,
    pub forms: Vec<BoundForm>,
    /// One coefficient per form feature.
    pub alpha: Vec<f64>,
    /// Coefficient of the frailty: 1 for the recurrent process, `α^υ_k` for
    /// cause k, 0 when the frailty does not enter.
    pub frailty_coef: f64,
    /// Gap restarts the baseline clock at each interval start.
    pub timescale: Timescale,
}

/// The subject-specific inputs of a hazard, apart from covariates.
pub struct SubjectInput<'a> {
    pub trajectories: Vec<&'a dyn Trajectory>,
    pub frailty: f64,
}

impl HazardSpec {
    fn clock(&self, t: f64, origin: f64) -> f64 {
        match self.timescale {
            Timescale::Gap => t - origin,
            Timescale::Calendar => t,
        }
    }
}

/// `log h(t)` for a subject whose current risk interval starts at `origin`.
pub fn log_hazard(spec: &HazardSpec, t: f64, origin: f64, w: &[f64], subj: &SubjectInput) -> Result<f64> {
    if w.len() != spec.gamma.len() {
        return Err(JmError::Dimension { expected: spec.gamma.len(), found: w.len() });
    }
    let s = spec.clock(t, origin);
    let mut lh = spec.basis.eval_row(s)?.dot(&spec.gamma0) + dot(w, &spec.gamma);
    let mut k = 0;
    for bf in &spec.forms {
        let traj = subj
            .trajectories
            .get(bf.outcome)
            .ok_or_else(|| invalid(format!("no trajectory for outcome {}", bf.outcome)))?;
        for f in eval_form(&bf.form, *traj, t)? {
            lh += spec.alpha[k] * f;
            k += 1;
        }
    }
    Ok(lh + spec.frailty_coef * subj.frailty)
}

/// `∫_a^b h(s) ds` within one risk interval starting at `origin`, by GK15
/// on pieces split at the baseline knots.
pub fn cumulative_hazard(
    spec: &HazardSpec,
    origin: f64,
    a: f64,
    b: f64,
    w: &[f64],
    subj: &SubjectInput,
) -> Result<f64> {
    if !(a <= b) {
        return Err(invalid(format!("interval bounds out of order: [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let shift = match spec.timescale {
        Timescale::Gap => origin,
        Timescale::Calendar => 0.0,
    };
    let breaks: Vec<f64> = spec.basis.interior_breaks().iter().map(|k| k + shift).collect();
    let mut err = None;
    let v = gauss_kronrod_15_split(
        |t| match log_hazard(spec, t, origin, w, subj) {
            Ok(lh) => lh.exp(),
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        },
        a,
        b,
        &breaks,
    );
    if let Some(e) = err {
        return Err(e);
    }
    v
}

/// The terminal record of one subject: exit interval, realized cause
/// (`None` when censored) and each cause's covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalRecord {
    pub tstart: f64,
    pub tstop: f64,
    pub cause: Option<usize>,
    pub w: Vec<Vec<f64>>,
}

/// `Σ_k I(δ=k) log h_k(T) − Σ_k H_k(T)`
pub fn terminal_loglik(causes: &[HazardSpec], rec: &TerminalRecord, subj: &SubjectInput) -> Result<f64> {
    if rec.w.len() != causes.len() {
        return Err(JmError::Dimension { expected: causes.len(), found: rec.w.len() });
    }
    let mut ll = 0.0;
    for (k, spec) in causes.iter().enumerate() {
        if rec.cause == Some(k) {
            let lh = log_hazard(spec, rec.tstop, rec.tstart, &rec.w[k], subj)?;
            if !lh.is_finite() {
                return Err(numerical(format!("{}: log-hazard at the event time is {lh}", spec.stratum)));
            }
            ll += lh;
        }
        ll -= cumulative_hazard(spec, rec.tstart, rec.tstart, rec.tstop, &rec.w[k], subj)?;
    }
    if !ll.is_finite() {
        return Err(numerical("terminal log-likelihood is not finite"));
    }
    Ok(ll)
}

/// One recurrent risk interval; an event, if any, happens at `tstop`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskInterval {
    pub tstart: f64,
    pub tstop: f64,
    pub event: bool,
    pub w: Vec<f64>,
}

/// `Σ_l [δ_l log h(R_l) − ∫ h over interval l]`. Gaps between intervals
/// contribute nothing.
pub fn recurrent_loglik(spec: &HazardSpec, intervals: &[RiskInterval], subj: &SubjectInput) -> Result<f64> {
    let mut ll = 0.0;
    let mut prev_stop = f64::NEG_INFINITY;
    for iv in intervals {
        if !(iv.tstart < iv.tstop) {
            return Err(invalid(format!("degenerate risk interval [{}, {}]", iv.tstart, iv.tstop)));
        }
        if iv.tstart < prev_stop {
            return Err(invalid("risk intervals overlap or are unsorted"));
        }
        prev_stop = iv.tstop;
        if iv.event {
            let lh = log_hazard(spec, iv.tstop, iv.tstart, &iv.w, subj)?;
            if !lh.is_finite() {
                return Err(numerical(format!("{}: log-hazard at an event is {lh}", spec.stratum)));
            }
            ll += lh;
        }
        ll -= cumulative_hazard(spec, iv.tstart, iv.tstart, iv.tstop, &iv.w, subj)?;
    }
    Ok(ll)
}

/// `log h` at `t` for the recurrent process, locating the risk interval
/// that contains `t`.
pub fn recurrent_log_hazard(
    spec: &HazardSpec,
    t: f64,
    intervals: &[RiskInterval],
    subj: &SubjectInput,
) -> Result<f64> {
    let iv = intervals
        .iter()
        .find(|iv| t > iv.tstart && t <= iv.tstop)
        .ok_or_else(|| invalid(format!("t = {t} lies in a non-risk period")))?;
    log_hazard(spec, t, iv.tstart, &iv.w, subj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_spec(h: f64) -> HazardSpec {
        let basis = SplineBasis::uniform(0.0, 10.0, 5, 2).unwrap();
        HazardSpec {
            stratum: "CR1".into(),
            basis,
            gamma0: vec![h.ln(); 5],
            gamma: vec![],
            forms: vec![],
            alpha: vec![],
            frailty_coef: 0.0,
            timescale: Timescale::Calendar,
        }
    }

    fn no_subject() -> SubjectInput<'static> {
        SubjectInput { trajectories: vec![], frailty: 0.0 }
    }

    #[test]
    fn form_examples() {
        let traj = LinearTrajectory { intercept: 2.0, slope: -1.5 };
        let slope = FunctionalForm::new("y", FormKind::Slope, Transform::Identity);
        assert_eq!(eval_form(&slope, &traj, 3.3).unwrap(), vec![-1.5]);
        let area = FunctionalForm::new("y", FormKind::Area, Transform::Identity);
        assert!((eval_form(&area, &traj, 2.0).unwrap()[0] - 0.5).abs() < 1e-15);
        assert!(eval_form(&area, &traj, 0.0).is_err());
        let zero = LinearTrajectory { intercept: 0.0, slope: -1.5 };
        let expit_v = FunctionalForm::new("y", FormKind::Value, Transform::Expit);
        assert_eq!(eval_form(&expit_v, &zero, 0.0).unwrap(), vec![0.5]);
        let dexpit = FunctionalForm::new("y", FormKind::Slope, Transform::Dexpit);
        assert!((eval_form(&dexpit, &zero, 0.0).unwrap()[0] + 0.375).abs() < 1e-15);
        let log = FunctionalForm::new("y", FormKind::Value, Transform::Log);
        assert!(eval_form(&log, &traj, 2.0).is_err());
        let poly = FunctionalForm::new("y", FormKind::Value, Transform::Poly3);
        assert_eq!(eval_form(&poly, &traj, 0.0).unwrap(), vec![2.0, 4.0, 8.0]);
    }

    #[test]
    fn null_model_and_frailty_shift() {
        let mut spec = constant_spec(1.0);
        assert_eq!(log_hazard(&spec, 1.0, 0.0, &[], &no_subject()).unwrap(), 0.0);
        spec.frailty_coef = 1.0;
        let s0 = SubjectInput { trajectories: vec![], frailty: 0.3 };
        let s1 = SubjectInput { trajectories: vec![], frailty: 1.3 };
        let a = log_hazard(&spec, 1.0, 0.0, &[], &s0).unwrap();
        let b = log_hazard(&spec, 1.0, 0.0, &[], &s1).unwrap();
        assert!((b.exp() / a.exp() - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn cumulative_examples() {
        let spec = constant_spec(0.2);
        let h = cumulative_hazard(&spec, 0.0, 0.0, 5.0, &[], &no_subject()).unwrap();
        assert!((h - 1.0).abs() < 1e-10);
        assert_eq!(cumulative_hazard(&spec, 0.0, 3.0, 3.0, &[], &no_subject()).unwrap(), 0.0);
    }

    #[test]
    fn log_linear_hazard_closed_form() {
        // exp(a + b t) through the value form of a linear trajectory
        let (a, b): (f64, f64) = (-1.2, 0.35);
        let traj = LinearTrajectory { intercept: 0.0, slope: 1.0 };
        let mut spec = constant_spec(a.exp());
        spec.forms = vec![BoundForm { form: FunctionalForm::value("y"), outcome: 0 }];
        spec.alpha = vec![b];
        let subj = SubjectInput { trajectories: vec![&traj], frailty: 0.0 };
        let (t0, t1) = (0.7, 8.9);
        let got = cumulative_hazard(&spec, 0.0, t0, t1, &[], &subj).unwrap();
        let want = a.exp() / b * ((b * t1).exp() - (b * t0).exp());
        assert!((got - want).abs() < 1e-8 * want);
    }

    #[test]
    fn terminal_examples() {
        let h = 0.4;
        let spec = constant_spec(h);
        let mut rec = TerminalRecord { tstart: 0.0, tstop: 2.0, cause: Some(0), w: vec![vec![]] };
        let ll = terminal_loglik(&[spec.clone()], &rec, &no_subject()).unwrap();
        assert!((ll - (h.ln() - 2.0 * h)).abs() < 1e-12);
        rec.cause = None;
        let ll = terminal_loglik(&[spec.clone(), spec.clone()], &TerminalRecord { w: vec![vec![], vec![]], ..rec.clone() }, &no_subject()).unwrap();
        assert!((ll + 4.0 * h).abs() < 1e-12);
        let mut dead = spec;
        dead.gamma0 = vec![f64::NEG_INFINITY; 5];
        rec.cause = Some(0);
        assert!(terminal_loglik(&[dead], &rec, &no_subject()).is_err());
    }

    #[test]
    fn recurrent_examples() {
        let h = 0.3;
        let spec = constant_spec(h);
        let one = [RiskInterval { tstart: 1.0, tstop: 3.5, event: false, w: vec![] }];
        let ll = recurrent_loglik(&spec, &one, &no_subject()).unwrap();
        assert!((ll + h * 2.5).abs() < 1e-12);
        let two = [
            RiskInterval { tstart: 0.0, tstop: 2.0, event: true, w: vec![] },
            RiskInterval { tstart: 2.5, tstop: 6.0, event: false, w: vec![] },
        ];
        let ll = recurrent_loglik(&spec, &two, &no_subject()).unwrap();
        assert!((ll - (h.ln() - h * 5.5)).abs() < 1e-12);
        assert!(recurrent_log_hazard(&spec, 2.2, &two, &no_subject()).is_err());
        let mut gap = spec.clone();
        gap.timescale = Timescale::Gap;
        let from_zero = [RiskInterval { tstart: 0.0, tstop: 4.0, event: true, w: vec![] }];
        assert_eq!(
            recurrent_loglik(&gap, &from_zero, &no_subject()).unwrap(),
            recurrent_loglik(&spec, &from_zero, &no_subject()).unwrap()
        );
    }
}
