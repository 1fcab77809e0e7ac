//! Unconstrained parameterization of a covariance matrix: log standard
//! deviations plus canonical partial correlations on the atanh scale.

use nalgebra::DMatrix;

use crate::error::{numerical, Result};

pub fn n_unconstrained(k: usize) -> usize {
    k + k * k.saturating_sub(1) / 2
}

/// Splits a covariance into standard deviations and the Cholesky factor of
/// its correlation matrix.
pub fn decompose(d: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = d.nrows();
    let sd: Vec<f64> = (0..k).map(|i| d[(i, i)].sqrt()).collect();
    if sd.iter().any(|s| !(*s > 0.0)) {
        return Err(numerical("covariance has a nonpositive diagonal"));
    }
    let corr = DMatrix::from_fn(k, k, |i, j| d[(i, j)] / (sd[i] * sd[j]));
    let l = corr
        .cholesky()
        .ok_or_else(|| numerical("covariance is not positive definite"))?
        .unpack();
    Ok((sd, l))
}

pub fn to_unconstrained(d: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = d.nrows();
    let (sd, l) = decompose(d)?;
    let mut u: Vec<f64> = sd.iter().map(|s| s.ln()).collect();
    for i in 1..k {
        let mut sum: f64 = 0.0;
        for j in 0..i {
            let z = (l[(i, j)] / (1.0 - sum).sqrt()).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            u.push(z.atanh());
            sum += l[(i, j)] * l[(i, j)];
        }
    }
    Ok(u)
}

/// Maps unconstrained values to `(D, sd, L)` and returns the log Jacobian
/// of the map from `u` to (standard deviations, correlation matrix).
pub fn from_unconstrained(u: &[f64], k: usize) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>, f64) {
    let sd: Vec<f64> = u[..k].iter().map(|v| v.exp()).collect();
    let mut log_jac: f64 = u[..k].iter().sum();
    let mut l = DMatrix::zeros(k, k);
    l[(0, 0)] = 1.0;
    let mut pos = k;
    for i in 1..k {
        let mut sum: f64 = 0.0;
        for j in 0..i {
            let z = u[pos].tanh();
            pos += 1;
            let rem = (1.0 - sum).max(0.0);
            l[(i, j)] = z * rem.sqrt();
            log_jac += (1.0 - z * z).ln() + 0.5 * rem.ln();
            sum += l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = (1.0 - sum).max(0.0).sqrt();
        // from the Cholesky factor to the correlation matrix
        log_jac += (k - 1 - i) as f64 * l[(i, i)].ln();
    }
    let corr = &l * l.transpose();
    let d = DMatrix::from_fn(k, k, |i, j| corr[(i, j)] * sd[i] * sd[j]);
    (d, sd, l, log_jac)
}
