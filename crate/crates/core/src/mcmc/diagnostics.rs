//! Convergence diagnostics and posterior summaries.

use serde::Serialize;

use crate::error::{invalid, numerical, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic Gelman–Rubin potential scale reduction `√(V̂/W)`.
pub fn rhat(chains: &[&[f64]]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(invalid("R-hat needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(invalid("R-hat needs chains of equal length >= 2"));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / m as f64;
    if !(w > 0.0) {
        return Err(numerical("zero within-chain variance"));
    }
    let b = n as f64 * var(&means);
    let nf = n as f64;
    let v = (nf - 1.0) / nf * w + b / nf;
    Ok((v / w).sqrt())
}

/// Monte Carlo standard error by batch means with `⌊√n⌋` batches.
pub fn mcse(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor() as usize;
    if b < 2 {
        return f64::NAN;
    }
    let size = n / b;
    let means: Vec<f64> = (0..b).map(|k| mean(&x[k * size..(k + 1) * size])).collect();
    (var(&means) / b as f64).sqrt()
}

/// Sample quantile with linear interpolation between order statistics
/// (the default rule of R and NumPy).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub mcse: f64,
    pub rhat: Option<f64>,
}

/// Mean, sd, median and central 95% interval of pooled draws.
pub fn summarize_values(parameter: &str, draws: &[f64]) -> Result<SummaryRow> {
    if draws.is_empty() {
        return Err(invalid(format!("{parameter}: no draws")));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SummaryRow {
        parameter: parameter.to_string(),
        mean: mean(draws),
        sd: if draws.len() > 1 { var(draws).sqrt() } else { 0.0 },
        lower: quantile(&sorted, 0.025),
        median: quantile(&sorted, 0.5),
        upper: quantile(&sorted, 0.975),
        mcse: mcse(draws),
        rhat: None,
    })
}
