//! Drives the command-line front end from code: loads a JSON run config,
//! simulates a dataset and fits it, as `bjm simulate` and `bjm fit` would.
//!
//! cargo run --release --example cli_config -- [out_dir]

use bounded_jm::cli::{run, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "cli_out".into());
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/scenario_b.json");
    let cfg = RunConfig::load(config.as_ref())?;
    println!("config sha256 {}", cfg.hash());

    let sim = format!("{out}/sim");
    let code = run(["bjm", "simulate", "-c", config, "-o", &sim, "--n", "120"]);
    assert_eq!(code, 0);
    let long = format!("{sim}/longitudinal.csv");
    let surv = format!("{sim}/survival.csv");
    let fit = format!("{out}/fit");
    let code = run(["bjm", "fit", "-c", config, "-o", &fit, "--longitudinal", &long, "--survival", &surv, "--iterations", "1500", "--warmup", "750"]);
    assert_eq!(code, 0);
    let code = run(["bjm", "diagnose", "--draws", &format!("{fit}/draws.csv"), "-o", &format!("{out}/diag")]);
    std::process::exit(code);
}
