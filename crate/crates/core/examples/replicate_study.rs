//! A small replication study: the truth fitter checks the harness itself,
//! then a short MCMC run produces a bias/MSE table.
//!
//! cargo run --release --example replicate_study

use bounded_jm::mcmc::ChainConfig;
use bounded_jm::simulate::{replicate_study, McmcFitter, Scenario, ScenarioConfig, StudyConfig, TruthFitter, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig { seed: 3, ..ScenarioConfig::new(Scenario::B, 150) };
    let study = StudyConfig { replicas: 4, variants: vec![Variant::Beta, Variant::Gaussian], ..Default::default() };

    let check = replicate_study(&cfg, &study, &TruthFitter, &|_| {})?;
    assert!(check.rows.iter().all(|r| r.bias == 0.0 && r.mse == 0.0));
    println!("truth fitter: {} rows, all zero bias", check.rows.len());

    let fitter = McmcFitter { chains: ChainConfig { chains: 2, iterations: 1500, warmup: 750, workers: 1, ..Default::default() } };
    let result = replicate_study(&cfg, &study, &fitter, &|log| {
        println!("  replica {} [{}] max R-hat {:?}, {:.0}s", log.replica, log.variant, log.max_rhat, log.seconds)
    })?;
    result.write_csv(std::io::stdout())?;
    Ok(())
}
