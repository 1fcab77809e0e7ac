//! Generic Metropolis–Hastings and Gibbs kernels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::basis::PenaltyMatrix;
use crate::spec::GammaPrior;

/// Outcome of one random-walk step.
#[derive(Debug, Clone, PartialEq)]
pub struct MhResult {
    pub x: Vec<f64>,
    pub logp: f64,
    pub accepted: bool,
}

/// Gaussian random-walk proposal `x + scale · L z`.
pub fn propose<R: Rng + ?Sized>(x: &[f64], chol: &DMatrix<f64>, scale: f64, rng: &mut R) -> Vec<f64> {
    let d = x.len();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = x.to_vec();
    for r in 0..d {
        let mut s = 0.0;
        for c in 0..=r {
            s += chol[(r, c)] * z[c];
        }
        out[r] += scale * s;
    }
    out
}

/// Accepts `log_ratio` with probability `min(1, e^{log_ratio})`; a
/// non-finite ratio is a rejection.
pub fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// One symmetric random-walk MH step on `logp`, where `current_lp` is
/// `logp(x)`. `chol` is the lower Cholesky factor of the unscaled
/// proposal covariance.
pub fn mh_update<R, F>(x: &[f64], current_lp: f64, mut logp: F, chol: &DMatrix<f64>, scale: f64, rng: &mut R) -> MhResult
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    let y = propose(x, chol, scale, rng);
    let lp = logp(&y);
    if lp.is_finite() && accept(lp - current_lp, rng) {
        MhResult { x: y, logp: lp, accepted: true }
    } else {
        MhResult { x: x.to_vec(), logp: current_lp, accepted: false }
    }
}

/// Central finite-difference Hessian.
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    let f0 = f(x);
    let mut y = x.to_vec();
    for a in 0..d {
        y[a] = x[a] + h;
        let fp = f(&y);
        y[a] = x[a] - h;
        let fm = f(&y);
        y[a] = x[a];
        out[(a, a)] = (fp - 2.0 * f0 + fm) / (h * h);
        for b in 0..a {
            let mut e = |sa: f64, sb: f64| {
                y[a] = x[a] + sa * h;
                y[b] = x[b] + sb * h;
                let v = f(&y);
                y[a] = x[a];
                y[b] = x[b];
                v
            };
            let v = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Lower Cholesky factor of the inverse of a precision matrix, after
/// replacing eigenvalues by their magnitudes and flooring them. Falls
/// back to the identity when the input is not finite.
pub fn proposal_from_precision(precision: &DMatrix<f64>) -> DMatrix<f64> {
    let d = precision.nrows();
    if d == 0 {
        return DMatrix::zeros(0, 0);
    }
    if precision.iter().any(|v| !v.is_finite()) {
        return DMatrix::identity(d, d);
    }
    let sym = (precision + precision.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (max * 1e-10).max(1e-12);
    let inv = DVector::from_iterator(d, eig.eigenvalues.iter().map(|v| 1.0 / v.abs().max(floor)));
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    match cov.clone().cholesky() {
        Some(c) => c.unpack(),
        None => DMatrix::from_diagonal(&cov.diagonal().map(|v| v.abs().max(1e-300).sqrt())),
    }
}

/// Rank of the prior on spline coefficients that enters the `τ` update.
pub fn penalty_rank(penalty: &PenaltyMatrix) -> usize {
    if penalty.ridge > 0.0 {
        penalty.dim()
    } else {
        penalty.dim().saturating_sub(penalty.order)
    }
}

/// Draw of the smoothing precision from its conjugate conditional
/// `Gam(k₀ + rank/2, λ₀ + γ₀ᵀMγ₀/2)`.
pub fn gibbs_tau<R: Rng + ?Sized>(gamma0: &[f64], penalty: &PenaltyMatrix, prior: GammaPrior, rng: &mut R) -> f64 {
    let (shape, rate) = tau_conditional(gamma0, penalty, prior);
    Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng)
}

/// Shape and rate of the `τ` full conditional.
pub fn tau_conditional(gamma0: &[f64], penalty: &PenaltyMatrix, prior: GammaPrior) -> (f64, f64) {
    (
        prior.shape + 0.5 * penalty_rank(penalty) as f64,
        prior.rate + 0.5 * penalty.quad_form(gamma0),
    )
}
