//! Convergence diagnostics on synthetic chains: R-hat for mixed and
//! separated chains, and posterior summaries with Monte Carlo error.
//!
//! cargo run --example diagnostics

use bounded_jm::mcmc::{mcse, rhat, summarize_values};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // AR(1) chains, so the MCSE exceeds the iid value
    let mut chain = |start: f64, shift: f64| -> Vec<f64> {
        let mut x = start;
        (0..2000)
            .map(|_| {
                x = 0.9 * x + (1.0f64 - 0.81).sqrt() * rng.sample::<f64, _>(StandardNormal);
                x + shift
            })
            .collect()
    };
    let mixed = [chain(5.0, 0.0), chain(-5.0, 0.0), chain(0.0, 0.0)];
    let apart = [chain(0.0, 0.0), chain(0.0, 3.0)];
    let refs = |c: &[Vec<f64>]| c.iter().map(|v| v[500..].to_vec()).collect::<Vec<_>>();
    let (m, a) = (refs(&mixed), refs(&apart));
    let slices = |c: &[Vec<f64>]| -> f64 { rhat(&c.iter().map(|v| v.as_slice()).collect::<Vec<_>>()).unwrap() };
    println!("R-hat, mixed chains: {:.3}", slices(&m));
    println!("R-hat, separated chains: {:.3}", slices(&a));

    let pooled = m.concat();
    let s = summarize_values("theta", &pooled)?;
    println!(
        "theta: mean {:.3} sd {:.3} 95% [{:.3}, {:.3}] MCSE {:.4} (iid would be {:.4})",
        s.mean, s.sd, s.lower, s.upper, mcse(&pooled), s.sd / (pooled.len() as f64).sqrt()
    );
    Ok(())
}
