//! Model definition: outcome families, design terms, hazards and their
//! functional forms, spline settings and priors.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

impl Family {
    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Beta => Link::Logit,
        }
    }
}

/// One term of a longitudinal design formula.
///
/// Covariate terms read the subject's baseline covariates, which must be
/// constant within a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Time,
    Covariate(String),
    /// Interaction of time with a baseline covariate.
    TimeBy(String),
    /// Natural cubic spline of time, `knots.len() - 1` columns.
    NaturalSpline { knots: Vec<f64> },
}

impl Term {
    pub fn width(&self) -> usize {
        match self {
            Term::NaturalSpline { knots } => knots.len().saturating_sub(1),
            _ => 1,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        match self {
            Term::Intercept => vec!["intercept".into()],
            Term::Time => vec!["time".into()],
            Term::Covariate(c) => vec![c.clone()],
            Term::TimeBy(c) => vec![format!("time:{c}")],
            Term::NaturalSpline { knots } => {
                (1..knots.len()).map(|k| format!("ns(time)[{k}]")).collect()
            }
        }
    }

    pub fn covariate(&self) -> Option<&str> {
        match self {
            Term::Covariate(c) | Term::TimeBy(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    pub family: Family,
    #[serde(default)]
    pub link: Option<Link>,
    pub fixed: Vec<Term>,
    #[serde(default)]
    pub random: Vec<Term>,
    /// Closed interval of raw values for a bounded (beta) outcome. When
    /// present, values are rescaled into (0, 1) at ingestion; when absent the
    /// raw values must already lie strictly inside (0, 1).
    #[serde(default)]
    pub bounds: Option<[f64; 2]>,
}

impl OutcomeSpec {
    pub fn link(&self) -> Link {
        self.link.unwrap_or_else(|| self.family.canonical_link())
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.fixed.iter().flat_map(|t| t.column_names()).collect()
    }

    pub fn random_names(&self) -> Vec<String> {
        self.random.iter().flat_map(|t| t.column_names()).collect()
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.iter().map(Term::width).sum()
    }

    pub fn n_random(&self) -> usize {
        self.random.iter().map(Term::width).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormKind {
    Value,
    Slope,
    Acceleration,
    Area,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    #[serde(rename = "none")]
    Identity,
    #[serde(rename = "log")]
    Log,
    #[serde(rename = "log2")]
    Log2,
    #[serde(rename = "log10")]
    Log10,
    #[serde(rename = "sqrt")]
    Sqrt,
    #[serde(rename = "exp")]
    Exp,
    #[serde(rename = "expit")]
    Expit,
    #[serde(rename = "abs")]
    Abs,
    #[serde(rename = "Dexp", alias = "dexp")]
    Dexp,
    #[serde(rename = "Dexpit", alias = "dexpit")]
    Dexpit,
    #[serde(rename = "poly2")]
    Poly2,
    #[serde(rename = "poly3")]
    Poly3,
    #[serde(rename = "poly4")]
    Poly4,
}

impl Transform {
    pub fn label(self) -> &'static str {
        match self {
            Transform::Identity => "none",
            Transform::Log => "log",
            Transform::Log2 => "log2",
            Transform::Log10 => "log10",
            Transform::Sqrt => "sqrt",
            Transform::Exp => "exp",
            Transform::Expit => "expit",
            Transform::Abs => "abs",
            Transform::Dexp => "Dexp",
            Transform::Dexpit => "Dexpit",
            Transform::Poly2 => "poly2",
            Transform::Poly3 => "poly3",
            Transform::Poly4 => "poly4",
        }
    }

    /// Number of association coefficients this transform contributes.
    pub fn width(self) -> usize {
        match self {
            Transform::Poly2 => 2,
            Transform::Poly3 => 3,
            Transform::Poly4 => 4,
            _ => 1,
        }
    }

    /// Transform/kind pairs permitted for each functional form.
    pub fn allowed_for(self, kind: FormKind) -> bool {
        use Transform::*;
        match kind {
            FormKind::Value => matches!(
                self,
                Identity | Log | Log2 | Log10 | Sqrt | Exp | Expit | Poly2 | Poly3 | Poly4
            ),
            FormKind::Slope => matches!(self, Identity | Abs | Dexp | Dexpit),
            FormKind::Acceleration | FormKind::Area => self == Identity,
        }
    }
}

/// A transformation of one marker's trajectory entering a hazard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionalForm {
    pub outcome: String,
    pub kind: FormKind,
    #[serde(default = "default_transform")]
    pub transform: Transform,
}

fn default_transform() -> Transform {
    Transform::Identity
}

impl FunctionalForm {
    pub fn new(outcome: &str, kind: FormKind, transform: Transform) -> Self {
        Self { outcome: outcome.to_string(), kind, transform }
    }

    pub fn value(outcome: &str) -> Self {
        Self::new(outcome, FormKind::Value, Transform::Identity)
    }

    pub fn width(&self) -> usize {
        self.transform.width()
    }

    /// Coefficient labels, e.g. `y1.expit(value)` or `y2.poly2(value)[2]`.
    pub fn labels(&self) -> Vec<String> {
        let kind = match self.kind {
            FormKind::Value => "value",
            FormKind::Slope => "slope",
            FormKind::Acceleration => "acceleration",
            FormKind::Area => "area",
        };
        let base = match self.transform {
            Transform::Identity => format!("{}.{kind}", self.outcome),
            t => format!("{}.{}({kind})", self.outcome, t.label()),
        };
        if self.width() == 1 {
            vec![base]
        } else {
            (1..=self.width()).map(|p| format!("{base}[{p}]")).collect()
        }
    }
}

impl fmt::Display for FunctionalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.labels()[0])
    }
}

/// Recurrent-event clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timescale {
    /// Baseline restarts at the start of every risk interval.
    Gap,
    #[default]
    Calendar,
}

/// Stratum label of the recurrent process in survival data.
pub const RECURRENT_STRATUM: &str = "R";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardConfig {
    /// `"R"` for the recurrent process, `"CR1"`, `"CR2"`, ... for causes.
    pub stratum: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub forms: Vec<FunctionalForm>,
    /// Whether the shared frailty enters this hazard. For the recurrent
    /// process it enters with coefficient 1; for a cause it is scaled by an
    /// estimated coefficient.
    #[serde(default)]
    pub frailty: bool,
}

impl HazardConfig {
    pub fn is_recurrent(&self) -> bool {
        self.stratum == RECURRENT_STRATUM
    }

    pub fn alpha_labels(&self) -> Vec<String> {
        self.forms.iter().flat_map(|f| f.labels()).collect()
    }

    pub fn n_alpha(&self) -> usize {
        self.forms.iter().map(FunctionalForm::width).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineSettings {
    pub q: usize,
    pub degree: usize,
    pub order: usize,
    pub ridge: f64,
}

impl Default for SplineSettings {
    fn default() -> Self {
        Self { q: 10, degree: 2, order: 2, ridge: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl NormalPrior {
    pub fn logpdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (2.0 * std::f64::consts::PI * self.var).ln() - 0.5 * d * d / self.var
    }
}

impl GammaPrior {
    pub fn logpdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - statrs::function::gamma::ln_gamma(self.shape)
            + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Prior hyperparameters. All fields have documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub beta: NormalPrior,
    pub gamma: NormalPrior,
    pub alpha: NormalPrior,
    pub alpha_frailty: NormalPrior,
    pub sigma_y: GammaPrior,
    pub sigma_frailty: GammaPrior,
    pub phi: GammaPrior,
    pub tau: GammaPrior,
    /// Prior on each random-effect standard deviation.
    pub re_sd: GammaPrior,
    pub lkj_eta: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let wide = NormalPrior { mean: 0.0, var: 100.0 };
        Self {
            beta: wide,
            gamma: wide,
            alpha: wide,
            alpha_frailty: wide,
            sigma_y: GammaPrior { shape: 1.0, rate: 1.0 },
            sigma_frailty: GammaPrior { shape: 1.0, rate: 1.0 },
            phi: GammaPrior { shape: 1.0, rate: 0.1 },
            tau: GammaPrior { shape: 1.0, rate: 0.005 },
            re_sd: GammaPrior { shape: 1.0, rate: 1.0 },
            lkj_eta: 2.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("alpha_frailty", self.alpha_frailty),
        ] {
            if !(p.var > 0.0) || !p.mean.is_finite() {
                return Err(invalid(format!("prior {name}: variance must be positive")));
            }
        }
        for (name, g) in [
            ("sigma_y", self.sigma_y),
            ("sigma_frailty", self.sigma_frailty),
            ("phi", self.phi),
            ("tau", self.tau),
            ("re_sd", self.re_sd),
        ] {
            if !(g.shape > 0.0 && g.rate > 0.0) {
                return Err(invalid(format!("prior {name}: gamma parameters must be positive")));
            }
        }
        if !(self.lkj_eta > 0.0) {
            return Err(invalid("lkj_eta must be positive"));
        }
        Ok(())
    }
}

/// Full joint-model definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcomes: Vec<OutcomeSpec>,
    #[serde(default)]
    pub hazards: Vec<HazardConfig>,
    #[serde(default)]
    pub timescale: Timescale,
    #[serde(default)]
    pub spline: SplineSettings,
    #[serde(default)]
    pub priors: PriorSpec,
    /// Standardize survival covariates internally; estimates are always
    /// reported on the original scale.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcomes.iter().position(|o| o.name == name)
    }

    pub fn hazard_index(&self, stratum: &str) -> Option<usize> {
        self.hazards.iter().position(|h| h.stratum == stratum)
    }

    pub fn recurrent(&self) -> Option<usize> {
        self.hazards.iter().position(HazardConfig::is_recurrent)
    }

    /// Indices of competing-cause hazards, in declaration order.
    pub fn causes(&self) -> Vec<usize> {
        (0..self.hazards.len()).filter(|&h| !self.hazards[h].is_recurrent()).collect()
    }

    pub fn has_frailty(&self) -> bool {
        self.recurrent().map_or(false, |r| self.hazards[r].frailty)
    }

    /// Names of baseline covariates referenced by longitudinal terms.
    pub fn longitudinal_covariates(&self) -> BTreeSet<String> {
        self.outcomes
            .iter()
            .flat_map(|o| o.fixed.iter().chain(&o.random))
            .filter_map(|t| t.covariate().map(str::to_string))
            .collect()
    }

    /// Structural checks independent of any data.
    pub fn check(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for o in &self.outcomes {
            if !names.insert(o.name.as_str()) {
                return Err(invalid(format!("duplicate outcome {}", o.name)));
            }
            if o.link() != o.family.canonical_link() {
                return Err(invalid(format!(
                    "outcome {}: {:?} family requires the {:?} link",
                    o.name,
                    o.family,
                    o.family.canonical_link()
                )));
            }
            if o.fixed.is_empty() {
                return Err(invalid(format!("outcome {} has no fixed effects", o.name)));
            }
            if let Some([a, b]) = o.bounds {
                if o.family != Family::Beta {
                    return Err(invalid(format!("outcome {}: bounds require the beta family", o.name)));
                }
                if !(a < b) {
                    return Err(invalid(format!("outcome {}: empty bounds", o.name)));
                }
            }
            for t in o.fixed.iter().chain(&o.random) {
                if let Term::NaturalSpline { knots } = t {
                    if knots.len() < 2 || knots.windows(2).any(|w| !(w[1] > w[0])) {
                        return Err(invalid(format!(
                            "outcome {}: natural spline needs >= 2 increasing knots",
                            o.name
                        )));
                    }
                }
            }
            let fixed = o.fixed_names();
            let random = o.random_names();
            for list in [&fixed, &random] {
                let set: BTreeSet<_> = list.iter().collect();
                if set.len() != list.len() {
                    return Err(invalid(format!("outcome {}: repeated design term", o.name)));
                }
            }
        }
        let mut strata = BTreeSet::new();
        let mut n_rec = 0;
        for h in &self.hazards {
            if !strata.insert(h.stratum.as_str()) {
                return Err(invalid(format!("duplicate hazard stratum {}", h.stratum)));
            }
            if h.is_recurrent() {
                n_rec += 1;
            } else if !h.stratum.starts_with("CR") {
                return Err(invalid(format!(
                    "stratum {} must be \"R\" or start with \"CR\"",
                    h.stratum
                )));
            }
            for f in &h.forms {
                if self.outcome_index(&f.outcome).is_none() {
                    return Err(invalid(format!(
                        "hazard {}: form references undeclared outcome {}",
                        h.stratum, f.outcome
                    )));
                }
                if !f.transform.allowed_for(f.kind) {
                    return Err(invalid(format!(
                        "hazard {}: transform {} is not available for {:?}",
                        h.stratum,
                        f.transform.label(),
                        f.kind
                    )));
                }
            }
        }
        if n_rec > 1 {
            return Err(invalid("at most one recurrent process is supported"));
        }
        if !self.has_frailty() && self.hazards.iter().any(|h| !h.is_recurrent() && h.frailty) {
            return Err(invalid(
                "a cause can share the frailty only if the recurrent process carries one",
            ));
        }
        let s = &self.spline;
        if s.q <= s.order || s.order < 1 || s.q < s.degree + 1 || !(s.ridge > 0.0) {
            return Err(invalid(format!(
                "spline settings need q > order >= 1, q > degree and ridge > 0 (got {s:?})"
            )));
        }
        self.priors.validate()
    }
}
