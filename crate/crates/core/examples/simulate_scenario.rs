//! Generates one dataset per scenario, prints its characteristics and writes
//! the CSVs and the truth to a directory.
//!
//! cargo run --release --example simulate_scenario -- [out_dir]

use bounded_jm::simulate::{generate, summarize_dataset, Scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sim_out".into());
    for scenario in [Scenario::A, Scenario::B] {
        let cfg = ScenarioConfig { seed: 7, ..ScenarioConfig::new(scenario, 300) };
        let data = generate(&cfg)?;
        let s = summarize_dataset(&data);
        println!("scenario {scenario}: {s:#?}");
        println!("  largest inversion residual {:.1e}", data.max_inversion_residual);
        let dir = std::path::Path::new(&out).join(scenario.to_string());
        data.save(scenario, &dir)?;
        println!("  written to {}", dir.display());
    }
    Ok(())
}
