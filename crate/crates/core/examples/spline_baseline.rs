//! P-spline log baseline hazard: basis evaluation, the difference penalty
//! and the cumulative hazard by piecewise Gauss-Kronrod quadrature.
//!
//! cargo run --example spline_baseline

use bounded_jm::basis::{difference_penalty, gauss_kronrod_15, gauss_kronrod_15_split, SplineBasis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let basis = SplineBasis::uniform(0.0, 10.0, 9, 3)?;
    let q = basis.len();
    // a bathtub-shaped log hazard
    let gamma0: Vec<f64> = (0..q).map(|k| 0.08 * (k as f64 - 4.0).powi(2) - 2.0).collect();
    let log_h = |t: f64| basis.eval_row(t).map(|r| r.dot(&gamma0)).unwrap_or(f64::NAN);
    for t in [0.0, 2.5, 5.0, 7.5, 10.0] {
        let row = basis.eval(t)?;
        println!("t = {t:>4}: sum of basis = {:.12}, h0 = {:.4}", row.iter().sum::<f64>(), log_h(t).exp());
    }

    let pen = difference_penalty(q, 2, 1e-6)?;
    let flat = vec![1.0; q];
    println!("penalty of a constant: {:.2e}; of gamma0: {:.4}", pen.quad_form(&flat), pen.quad_form(&gamma0));

    let h = |t: f64| log_h(t).exp();
    let whole = gauss_kronrod_15(h, 0.0, 10.0)?;
    let split = gauss_kronrod_15_split(h, 0.0, 10.0, &basis.interior_breaks())?;
    println!("H0(10): one panel {whole:.10}, split at knots {split:.10}");
    Ok(())
}
