//! Prior log-densities.

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::basis::PenaltyMatrix;
use crate::longitudinal::LN_2PI;

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log normalizing constant of the LKJ distribution over `K × K`
/// correlation matrices, `log ∫ det(Ω)^{η−1} dΩ`.
pub fn lkj_log_normalizer(k: usize, eta: f64) -> f64 {
    let mut c = 0.0;
    for i in 1..k {
        let m = (k - i) as f64;
        let b = eta + (m - 1.0) / 2.0;
        c += (2.0 * eta - 2.0 + m) * m * std::f64::consts::LN_2 + m * ln_beta(b, b);
    }
    c
}

/// LKJ(η) log density of the correlation matrix `Ω = L Lᵀ`, given its
/// Cholesky factor.
pub fn lkj_logpdf(corr_chol: &DMatrix<f64>, eta: f64) -> f64 {
    let k = corr_chol.nrows();
    let logdet: f64 = (0..k).map(|i| corr_chol[(i, i)].ln()).sum::<f64>() * 2.0;
    (eta - 1.0) * logdet - lkj_log_normalizer(k, eta)
}

/// `N(0, (τM)^{-1})` log density of baseline spline coefficients.
pub fn penalized_normal_logpdf(gamma0: &[f64], tau: f64, penalty: &PenaltyMatrix, logdet_m: f64) -> f64 {
    if !(tau > 0.0) {
        return f64::NEG_INFINITY;
    }
    let q = gamma0.len() as f64;
    0.5 * (q * tau.ln() + logdet_m) - 0.5 * q * LN_2PI - 0.5 * tau * penalty.quad_form(gamma0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{difference_penalty, gauss_kronrod_15_split};
    use crate::spec::NormalPrior;

    #[test]
    fn normal_at_mode() {
        let p = NormalPrior { mean: 0.0, var: 100.0 };
        let want = -(10.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((p.logpdf(0.0) - want).abs() < 1e-14);
    }

    #[test]
    fn lkj_two_by_two_integrates_to_one() {
        for eta in [0.7, 1.0, 2.0, 5.0] {
            let dens = |r: f64| {
                let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, r, (1.0 - r * r).sqrt()]);
                lkj_logpdf(&l, eta).exp()
            };
            let breaks: Vec<f64> = (-19..20).map(|k| k as f64 / 20.0).collect();
            let total = gauss_kronrod_15_split(dens, -1.0, 1.0, &breaks).unwrap();
            let tol = if eta < 1.0 { 2e-2 } else { 1e-9 };
            assert!((total - 1.0).abs() < tol, "eta {eta}: {total}");
        }
    }

    #[test]
    fn lkj_one_is_flat() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.3, 0.954, 0.0, -0.2, 0.1, 0.97]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, -0.8, 0.6, 0.0, 0.5, 0.5, 0.7071]);
        assert!((lkj_logpdf(&a, 1.0) - lkj_logpdf(&b, 1.0)).abs() < 1e-14);
    }

    #[test]
    fn penalized_normal_at_mode_matches_cholesky_oracle() {
        let pen = difference_penalty(6, 2, 1e-3).unwrap();
        let tau = 3.5;
        let scaled = pen.matrix.clone() * tau;
        let chol = scaled.cholesky().unwrap();
        let logdet_cov = -2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let want = -0.5 * (6.0 * LN_2PI + logdet_cov);
        let got = penalized_normal_logpdf(&[0.0; 6], tau, &pen, pen.log_det().unwrap());
        assert!((got - want).abs() < 1e-10);
    }
}
