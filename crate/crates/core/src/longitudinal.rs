//! Longitudinal submodels: links, Gaussian and beta log-likelihoods, design
//! columns and the random-effects density.

use std::sync::Arc;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::basis::{Derivative, NaturalCubicBasis};
use crate::error::{invalid, numerical, JmError, Result};
use crate::spec::Term;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `η = xᵀβ + zᵀb`
pub fn linear_predictor(beta: &[f64], b: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
    if beta.len() != x.len() {
        return Err(JmError::Dimension { expected: beta.len(), found: x.len() });
    }
    if b.len() != z.len() {
        return Err(JmError::Dimension { expected: b.len(), found: z.len() });
    }
    Ok(dot(x, beta) + dot(z, b))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(JmError::OutOfRange(p, 0.0, 1.0));
    }
    Ok((p / (1.0 - p)).ln())
}

/// `log N(y; η, σ²)`
#[inline]
pub fn gaussian_loglik(y: f64, eta: f64, sigma: f64) -> f64 {
    let r = (y - eta) / sigma;
    -0.5 * LN_2PI - sigma.ln() - 0.5 * r * r
}

/// Beta log density in the mean–precision parameterization, shapes
/// `(μφ, (1−μ)φ)`.
pub fn beta_loglik(y_star: f64, mu: f64, phi: f64) -> Result<f64> {
    if !(y_star > 0.0 && y_star < 1.0) {
        return Err(JmError::OutOfRange(y_star, 0.0, 1.0));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(JmError::OutOfRange(mu, 0.0, 1.0));
    }
    if !(phi > 0.0) {
        return Err(invalid("beta precision must be positive"));
    }
    Ok(beta_loglik_unchecked(y_star.ln(), (-y_star).ln_1p(), mu, phi))
}

/// Beta log density from precomputed `ln y` and `ln(1 − y)`. Returns
/// `-inf` when `μ` underflows to 0 or 1.
#[inline]
pub(crate) fn beta_loglik_unchecked(ln_y: f64, ln_1my: f64, mu: f64, phi: f64) -> f64 {
    let p = mu * phi;
    let q = (1.0 - mu) * phi;
    if !(p > 0.0 && q > 0.0) {
        return f64::NEG_INFINITY;
    }
    ln_gamma(phi) - ln_gamma(p) - ln_gamma(q) + (p - 1.0) * ln_y + (q - 1.0) * ln_1my
}

/// `μ(1−μ)/(1+φ)`
pub fn beta_variance(mu: f64, phi: f64) -> f64 {
    mu * (1.0 - mu) / (1.0 + phi)
}

/// Trigamma function ψ'(x) for x > 0, by upward recurrence and the
/// asymptotic expansion.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Expected information about the logit-scale mean of one beta observation.
pub fn beta_fisher_eta(mu: f64, phi: f64) -> f64 {
    let p = mu * phi;
    let q = (1.0 - mu) * phi;
    let g = mu * (1.0 - mu);
    phi * phi * (trigamma(p) + trigamma(q)) * g * g
}

/// Multivariate normal log density of `b` with mean 0 and covariance `d`.
pub fn random_effects_logdensity(b: &[f64], d: &DMatrix<f64>) -> Result<f64> {
    if d.nrows() != b.len() || d.ncols() != b.len() {
        return Err(JmError::Dimension { expected: d.nrows(), found: b.len() });
    }
    let chol = d
        .clone()
        .cholesky()
        .ok_or_else(|| numerical("random-effects covariance is not positive definite"))?;
    Ok(mvn_logdensity_chol(b, chol.l_dirty()))
}

/// Same as [`random_effects_logdensity`] given the lower Cholesky factor
/// (only the lower triangle is read).
pub fn mvn_logdensity_chol(b: &[f64], l: &DMatrix<f64>) -> f64 {
    let k = b.len();
    let mut z = vec![0.0; k];
    let mut logdet = 0.0;
    for i in 0..k {
        let mut s = b[i];
        for j in 0..i {
            s -= l[(i, j)] * z[j];
        }
        z[i] = s / l[(i, i)];
        logdet += l[(i, i)].ln();
    }
    -0.5 * k as f64 * LN_2PI - logdet - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}


/// One compiled design column.
#[derive(Debug, Clone)]
enum Column {
    Intercept,
    Time,
    Covariate(usize),
    TimeBy(usize),
    Spline(Arc<NaturalCubicBasis>, usize),
}

/// Design terms compiled against a list of baseline covariate names.
/// Evaluates values, time derivatives and running integrals `∫_0^t`.
#[derive(Debug, Clone)]
pub struct DesignColumns {
    cols: Vec<Column>,
    names: Vec<String>,
}

impl DesignColumns {
    pub fn compile(terms: &[Term], covariates: &[String]) -> Result<Self> {
        let mut cols = Vec::new();
        let mut names = Vec::new();
        let find = |c: &str| {
            covariates
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| JmError::Schema(format!("formula references unknown column {c}")))
        };
        for t in terms {
            names.extend(t.column_names());
            match t {
                Term::Intercept => cols.push(Column::Intercept),
                Term::Time => cols.push(Column::Time),
                Term::Covariate(c) => cols.push(Column::Covariate(find(c)?)),
                Term::TimeBy(c) => cols.push(Column::TimeBy(find(c)?)),
                Term::NaturalSpline { knots } => {
                    let ns = Arc::new(NaturalCubicBasis::new(knots.clone())?);
                    for k in 0..ns.len() {
                        cols.push(Column::Spline(ns.clone(), k));
                    }
                }
            }
        }
        Ok(Self { cols, names })
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn eval_into(&self, t: f64, cov: &[f64], which: Derivative, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.cols) {
            *o = match (c, which) {
                (Column::Intercept, Derivative::Value) => 1.0,
                (Column::Intercept, Derivative::Integral) => t,
                (Column::Intercept, _) => 0.0,
                (Column::Time, Derivative::Value) => t,
                (Column::Time, Derivative::First) => 1.0,
                (Column::Time, Derivative::Second) => 0.0,
                (Column::Time, Derivative::Integral) => 0.5 * t * t,
                (Column::Covariate(k), Derivative::Value) => cov[*k],
                (Column::Covariate(k), Derivative::Integral) => cov[*k] * t,
                (Column::Covariate(_), _) => 0.0,
                (Column::TimeBy(k), Derivative::Value) => cov[*k] * t,
                (Column::TimeBy(k), Derivative::First) => cov[*k],
                (Column::TimeBy(_), Derivative::Second) => 0.0,
                (Column::TimeBy(k), Derivative::Integral) => cov[*k] * 0.5 * t * t,
                (Column::Spline(ns, k), w) => ns.column(*k, t, w),
            };
        }
    }

    pub fn eval(&self, t: f64, cov: &[f64], which: Derivative) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, cov, which, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use std::f64::consts::PI;

    #[test]
    fn linear_predictor_examples() {
        let v = linear_predictor(&[2.0, -1.5], &[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let v = linear_predictor(&[2.0, -1.5], &[-2.0, 1.5], &[1.0, 0.3], &[1.0, 0.3]).unwrap();
        assert!(v.abs() < 1e-15);
        let v = linear_predictor(&[2.0, -1.5], &[0.2, 0.1], &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!(linear_predictor(&[1.0], &[], &[1.0, 2.0], &[]).is_err());
    }

    #[test]
    fn expit_logit_pair() {
        assert_eq!(expit(0.0), 0.5);
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert!((expit(0.5) - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
        assert!((expit(0.5) - 0.62246).abs() < 1e-5);
        assert!(logit(0.0).is_err() && logit(1.0).is_err());
        assert!(expit(-800.0) >= 0.0 && expit(800.0) <= 1.0);
    }

    #[test]
    fn gaussian_examples() {
        let mode = gaussian_loglik(0.3, 0.3, 1.0);
        assert!((mode + 0.918_938_533_204_672_7).abs() < 1e-14);
        assert!((gaussian_loglik(1.3, 1.0, 0.3) - (gaussian_loglik(1.0, 1.0, 0.3) - 0.5)).abs() < 1e-12);
        let oracle = (1.0 / (0.5 * (2.0 * PI).sqrt()) * (-0.5f64 * (0.5f64 / 0.5).powi(2)).exp()).ln();
        assert!((gaussian_loglik(1.3, 0.8, 0.5) - oracle).abs() < 1e-13);
    }

    #[test]
    fn beta_examples() {
        for y in [0.01, 0.3, 0.77] {
            assert!(beta_loglik(y, 0.5, 2.0).unwrap().abs() < 1e-12);
            let a = beta_loglik(y, 0.3, 7.0).unwrap();
            let b = beta_loglik(1.0 - y, 0.7, 7.0).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        assert!(beta_loglik(0.0, 0.5, 2.0).is_err());
        assert!(beta_loglik(1.0, 0.5, 2.0).is_err());
    }

    #[test]
    fn beta_normalizes() {
        // midpoint rule on a fine grid; the density is bounded for these shapes
        let n = 200_000;
        let h = 1.0 / n as f64;
        let total: f64 = (0..n)
            .map(|k| beta_loglik((k as f64 + 0.5) * h, 0.3, 5.0).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn beta_variance_examples() {
        assert!((beta_variance(0.5, 1.0) - 0.125).abs() < 1e-15);
        assert!((beta_variance(0.3, 9.0) - 0.021).abs() < 1e-15);
        assert!(beta_variance(1e-12, 3.0) < 1e-12);
    }

    #[test]
    fn trigamma_known_values() {
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-11);
        assert!((trigamma(1e4) - (1e-4 + 0.5e-8 + 1.0 / 6e12)).abs() < 1e-18);
    }

    #[test]
    fn re_density_examples() {
        let d = DMatrix::identity(2, 2);
        let v = random_effects_logdensity(&[0.0, 0.0], &d).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]));
        let v = random_effects_logdensity(&[0.3, -1.0], &d).unwrap();
        let want = gaussian_loglik(0.3, 0.0, 0.5f64.sqrt()) + gaussian_loglik(-1.0, 0.0, 2f64.sqrt());
        assert!((v - want).abs() < 1e-13);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(random_effects_logdensity(&[0.0, 0.0], &bad).is_err());
    }

    #[test]
    fn re_density_matches_inverse_oracle() {
        let d: DMatrix<f64> = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.2, 0.3, 1.0, 0.1, -0.2, 0.1, 0.5]);
        let b = [0.4, -0.7, 0.2];
        let inv = d.clone().try_inverse().unwrap();
        let bv = DVector::from_row_slice(&b);
        let quad = (bv.transpose() * inv * &bv)[(0, 0)];
        let want = -1.5 * (2.0 * PI).ln() - 0.5 * d.determinant().ln() - 0.5 * quad;
        assert!((random_effects_logdensity(&b, &d).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn design_columns_derivatives() {
        let terms = vec![
            Term::Intercept,
            Term::Time,
            Term::Covariate("g".into()),
            Term::TimeBy("g".into()),
        ];
        let cols = DesignColumns::compile(&terms, &["g".to_string()]).unwrap();
        assert_eq!(cols.eval(0.26, &[1.0], Derivative::Value), vec![1.0, 0.26, 1.0, 0.26]);
        assert_eq!(cols.eval(2.0, &[3.0], Derivative::First), vec![0.0, 1.0, 0.0, 3.0]);
        assert_eq!(cols.eval(2.0, &[3.0], Derivative::Integral), vec![2.0, 2.0, 6.0, 6.0]);
        assert!(DesignColumns::compile(&[Term::Covariate("h".into())], &[]).is_err());
    }
}
