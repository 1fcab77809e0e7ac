//! The bounded marker: rescaling into the open unit interval and the beta
//! likelihood in its mean-precision form.
//!
//! cargo run --example beta_likelihood

use bounded_jm::data::rescale_bounded;
use bounded_jm::longitudinal::{beta_loglik, beta_variance, expit, gaussian_loglik};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a 0-100 score observed on 200 records, with values at both bounds
    for y in [0.0, 12.5, 50.0, 100.0] {
        println!("score {y:>5} -> {:.6}", rescale_bounded(y, 0.0, 100.0, 200)?);
    }

    let (eta, phi) = (0.8, 12.0);
    let mu = expit(eta);
    println!("\nmu = {mu:.4}, var = {:.5}", beta_variance(mu, phi));
    for y in [0.2, 0.5, 0.69, 0.9, 0.999] {
        println!(
            "y = {y:<5} beta loglik {:>9.4}   gaussian loglik on logit scale {:>9.4}",
            beta_loglik(y, mu, phi)?,
            gaussian_loglik((y / (1.0 - y)).ln(), eta, 0.6)
        );
    }
    Ok(())
}
