//! Fits the beta and Gaussian joint models to one Scenario B dataset and
//! compares the association estimates with the truth.
//!
//! cargo run --release --example fit_scenario_b

use bounded_jm::mcmc::{run_chains, ChainConfig};
use bounded_jm::model::Model;
use bounded_jm::simulate::{generate, Scenario, ScenarioConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig { seed: 11, ..ScenarioConfig::new(Scenario::B, 300) };
    let data = generate(&cfg)?;
    let chains = ChainConfig { chains: 3, iterations: 3000, warmup: 1500, seed: 1, ..Default::default() };
    for variant in [Variant::Beta, Variant::Gaussian] {
        let model = Model::from_data(&data.longitudinal, &data.survival, &cfg.fit_spec(variant)?)?;
        let start = std::time::Instant::now();
        let draws = run_chains(&model, &chains)?;
        let truth = cfg.truth(variant)?;
        println!("\n{variant} fit, {:.0}s, max R-hat {:.3}", start.elapsed().as_secs_f64(), draws.max_rhat().unwrap_or(f64::NAN));
        println!("{:<34} {:>8} {:>8} {:>18}", "parameter", "truth", "mean", "95% interval");
        for row in draws.summarize(true)? {
            if row.parameter.starts_with("gamma0_") || row.parameter.starts_with("tau_") {
                continue;
            }
            let t = truth.get(&row.parameter).map_or("-".to_string(), |v| format!("{v:.3}"));
            println!("{:<34} {:>8} {:>8.3} [{:>7.3}, {:>7.3}]", row.parameter, t, row.mean, row.lower, row.upper);
        }
    }
    Ok(())
}
