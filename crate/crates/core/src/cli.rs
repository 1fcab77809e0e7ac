//! The `bjm` command line: simulate, fit, replicate, summarize, diagnose.
//!
//! Every command reads one JSON config (sections `model`, `chains`,
//! `scenario`, `study`, `data`), lets flags override scalar fields, and
//! writes its outputs into one directory together with a `manifest.json`
//! recording the seed, the SHA-256 of the resolved config and the wall time.
//! Apart from the manifest's wall time, outputs are a pure function of the
//! inputs, the config and the seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LongitudinalDataset, SurvivalDataset};
use crate::error::{invalid, JmError, Result};
use crate::mcmc::{rhat, run_chains, ChainConfig, ChainDraws, PosteriorDraws, SummaryRow};
use crate::model::{is_monitored, Model};
use crate::simulate::{
    generate, replicate_study, summarize_dataset, Fitter, McmcFitter, ScenarioConfig, StudyConfig, TruthFitter, Variant,
};
use crate::spec::ModelSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// R̂ at or above this value flags nonconvergence.
pub const RHAT_THRESHOLD: f64 = 1.10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub longitudinal: Option<PathBuf>,
    #[serde(default)]
    pub survival: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FitterKind {
    #[default]
    Mcmc,
    /// Reports the true values; checks the harness.
    Truth,
}

/// The whole JSON config. Sections not used by a command are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub chains: Option<ChainConfig>,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
    #[serde(default)]
    pub fitter: FitterKind,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Parses a config, naming the section of any missing or unknown field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| invalid(format!("config is not valid JSON: {e}")))?;
        if let Some(obj) = value.as_object() {
            for (key, section) in obj {
                let check = match key.as_str() {
                    "model" => serde_json::from_value::<ModelSpec>(section.clone()).err(),
                    "chains" => serde_json::from_value::<ChainConfig>(section.clone()).err(),
                    "scenario" => serde_json::from_value::<ScenarioConfig>(section.clone()).err(),
                    "study" => serde_json::from_value::<StudyConfig>(section.clone()).err(),
                    "data" => serde_json::from_value::<DataPaths>(section.clone()).err(),
                    _ => None,
                };
                if let Some(e) = check {
                    return Err(invalid(format!("config section `{key}`: {e}")));
                }
            }
        }
        serde_json::from_value(value).map_err(|e| invalid(format!("config: {e}")))
    }

    /// SHA-256 of the config as serialized, recorded in every manifest.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Parser)]
#[command(name = "bjm", version, about = "Bayesian joint models for bounded longitudinal markers, recurrent events and competing risks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the `scenario` section.
    Simulate(SimulateArgs),
    /// Fit the `model` section to a dataset.
    Fit(FitArgs),
    /// Repeat simulate + fit and tabulate bias and MSE.
    Replicate(ReplicateArgs),
    /// Posterior summaries from a draws file.
    Summarize(DrawsArgs),
    /// R̂ table and plot-ready traces from a draws file.
    Diagnose(DrawsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of subjects (overrides `scenario.n`).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ChainFlags {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub longitudinal: Option<PathBuf>,
    #[arg(long)]
    pub survival: Option<PathBuf>,
    #[command(flatten)]
    pub chain: ChainFlags,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long, value_enum)]
    pub fitter: Option<FitterKind>,
    #[command(flatten)]
    pub chain: ChainFlags,
}

#[derive(Debug, Args)]
pub struct DrawsArgs {
    /// A draws.csv written by `fit`.
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub wall_seconds: f64,
    pub version: String,
    pub outputs: Vec<String>,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn output_dir(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or(cfg.output.as_ref())
        .cloned()
        .ok_or_else(|| invalid("no output directory: pass --out or set `output`"))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| invalid(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn finish(dir: &Path, command: &str, cfg: &RunConfig, start: Instant, mut outputs: Vec<String>) -> Result<()> {
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command: command.into(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        wall_seconds: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
        outputs,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn apply_chain_flags(chains: &mut ChainConfig, f: &ChainFlags) {
    if let Some(v) = f.chains {
        chains.chains = v;
    }
    if let Some(v) = f.iterations {
        chains.iterations = v;
    }
    if let Some(v) = f.warmup {
        chains.warmup = v;
    }
    if let Some(v) = f.workers {
        chains.workers = v;
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut cfg = load_config(args.common.config.as_ref())?;
    let mut sc = cfg.scenario.clone().ok_or_else(|| invalid("config has no `scenario` section"))?;
    if let Some(n) = args.n {
        sc.n = n;
    }
    if let Some(s) = args.common.seed.or(cfg.seed) {
        sc.seed = s;
    }
    cfg.seed = Some(sc.seed);
    cfg.scenario = Some(sc.clone());
    let dir = output_dir(args.common.out.as_ref(), &cfg)?;
    let data = generate(&sc)?;
    data.save(sc.scenario, &dir)?;
    let s = summarize_dataset(&data);
    println!(
        "scenario {}: {} subjects, censored {:.3}, causes {:?}, median observations {}",
        sc.scenario, s.subjects, s.censored_fraction, s.cause_fractions, s.median_observations
    );
    finish(&dir, "simulate", &cfg, start, vec!["longitudinal.csv".into(), "survival.csv".into(), "truth.json".into()])?;
    Ok(dir)
}

/// `summary.json` of a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub parameters: Vec<SummaryRow>,
    pub max_rhat: Option<f64>,
    pub converged: Option<bool>,
    /// Monitored parameters with R̂ ≥ 1.10.
    pub nonconverged: Vec<String>,
    /// Mean post-warmup acceptance over chains, per block.
    pub acceptance: BTreeMap<String, f64>,
}

pub fn summarize_draws(draws: &PosteriorDraws) -> Result<FitSummary> {
    let parameters = draws.summarize(true)?;
    let nonconverged: Vec<String> = parameters
        .iter()
        .filter(|r| draws.index(&r.parameter).map_or(false, |p| draws.monitored[p]))
        .filter(|r| r.rhat.map_or(false, |v| !(v < RHAT_THRESHOLD)))
        .map(|r| r.parameter.clone())
        .collect();
    let max_rhat = if draws.chains.len() > 1 { draws.max_rhat() } else { None };
    let mut acceptance = BTreeMap::new();
    if let Some(c) = draws.chains.first() {
        for k in c.acceptance.keys() {
            if let Some(r) = draws.acceptance_rate(k) {
                acceptance.insert(k.clone(), r);
            }
        }
    }
    Ok(FitSummary {
        converged: max_rhat.map(|_| nonconverged.is_empty()),
        max_rhat,
        nonconverged,
        parameters,
        acceptance,
    })
}

/// Long-format draws: `chain, iteration, parameter, value`.
pub fn write_draws<W: Write>(draws: &PosteriorDraws, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["chain", "iteration", "parameter", "value"])?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for (k, it) in chain.iterations.iter().enumerate() {
            for (p, name) in draws.names.iter().enumerate() {
                w.write_record([c.to_string(), it.to_string(), name.clone(), format!("{}", chain.values[k][p])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct DrawRecord {
    chain: usize,
    iteration: usize,
    parameter: String,
    value: f64,
}

/// Reads draws written by [`write_draws`]. Acceptance statistics are not
/// part of the file and come back empty.
pub fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    let file = File::open(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    // chain -> iteration -> values by parameter index
    let mut chains: BTreeMap<usize, BTreeMap<usize, Vec<Option<f64>>>> = BTreeMap::new();
    for rec in rdr.deserialize() {
        let r: DrawRecord = rec.map_err(|e| JmError::Schema(format!("draws: {e}")))?;
        let p = *index.entry(r.parameter.clone()).or_insert_with(|| {
            names.push(r.parameter.clone());
            names.len() - 1
        });
        let row = chains.entry(r.chain).or_default().entry(r.iteration).or_default();
        if row.len() <= p {
            row.resize(p + 1, None);
        }
        row[p] = Some(r.value);
    }
    if names.is_empty() {
        return Err(invalid(format!("{} contains no draws", path.display())));
    }
    let mut out = Vec::new();
    for (c, iters) in chains {
        let mut chain = ChainDraws {
            iterations: Vec::new(),
            values: Vec::new(),
            latent: Vec::new(),
            acceptance: BTreeMap::new(),
        };
        for (it, mut row) in iters {
            row.resize(names.len(), None);
            let vals: Option<Vec<f64>> = row.into_iter().collect();
            let vals = vals.ok_or_else(|| JmError::Schema(format!("draws: chain {c} iteration {it} is incomplete")))?;
            chain.iterations.push(it);
            chain.values.push(vals);
        }
        out.push(chain);
    }
    let monitored = names.iter().map(|n| is_monitored(n)).collect();
    Ok(PosteriorDraws { names, monitored, chains: out })
}

fn load_data(long: &Path, surv: &Path) -> Result<(LongitudinalDataset, SurvivalDataset)> {
    let l = LongitudinalDataset::load(long).map_err(|e| invalid(format!("{}: {e}", long.display())))?;
    let s = SurvivalDataset::load(surv).map_err(|e| invalid(format!("{}: {e}", surv.display())))?;
    Ok((l, s))
}

pub fn cmd_fit(args: &FitArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut cfg = load_config(args.common.config.as_ref())?;
    if let Some(p) = &args.longitudinal {
        cfg.data.longitudinal = Some(p.clone());
    }
    if let Some(p) = &args.survival {
        cfg.data.survival = Some(p.clone());
    }
    let spec = match (&cfg.model, &cfg.scenario) {
        (Some(m), _) => m.clone(),
        // the scenario's own model, beta variant
        (None, Some(sc)) => sc.fit_spec(Variant::Beta)?,
        (None, None) => return Err(invalid("config has no `model` section")),
    };
    let mut chains = cfg.chains.clone().unwrap_or_default();
    apply_chain_flags(&mut chains, &args.chain);
    if let Some(s) = args.common.seed.or(cfg.seed) {
        chains.seed = s;
    }
    cfg.seed = Some(chains.seed);
    cfg.chains = Some(chains.clone());
    let long = cfg.data.longitudinal.clone().ok_or_else(|| invalid("no longitudinal data path"))?;
    let surv = cfg.data.survival.clone().ok_or_else(|| invalid("no survival data path"))?;
    let dir = output_dir(args.common.out.as_ref(), &cfg)?;
    let (l, s) = load_data(&long, &surv)?;
    let model = Model::from_data(&l, &s, &spec)?;
    println!(
        "fitting {} subjects: {} chains x {} iterations ({} warmup)",
        model.n_subjects(),
        chains.chains,
        chains.iterations,
        chains.warmup
    );
    let draws = run_chains(&model, &chains)?;
    write_draws(&draws, create(&dir.join("draws.csv"))?)?;
    let summary = summarize_draws(&draws)?;
    match summary.converged {
        Some(false) => println!(
            "warning: R-hat >= {RHAT_THRESHOLD} for {}: chains have not converged",
            summary.nonconverged.join(", ")
        ),
        Some(true) => println!("max R-hat {:.3}", summary.max_rhat.unwrap_or(f64::NAN)),
        None => println!("single chain: R-hat not computed"),
    }
    write_json(&dir.join("summary.json"), &summary)?;
    finish(&dir, "fit", &cfg, start, vec!["draws.csv".into(), "summary.json".into()])?;
    Ok(dir)
}

pub fn cmd_replicate(args: &ReplicateArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut cfg = load_config(args.common.config.as_ref())?;
    let mut sc = cfg.scenario.clone().ok_or_else(|| invalid("config has no `scenario` section"))?;
    if let Some(s) = args.common.seed.or(cfg.seed) {
        sc.seed = s;
    }
    let mut study = cfg.study.clone().unwrap_or_default();
    if let Some(r) = args.replicas {
        study.replicas = r;
    }
    if let Some(w) = args.chain.workers {
        study.workers = w;
    }
    if let Some(f) = args.fitter {
        cfg.fitter = f;
    }
    let mut chains = cfg.chains.clone().unwrap_or_default();
    apply_chain_flags(&mut chains, &args.chain);
    // replicas already run in parallel; chains within a replica do not
    if study.workers != 1 {
        chains.workers = 1;
    }
    cfg.seed = Some(sc.seed);
    cfg.scenario = Some(sc.clone());
    cfg.study = Some(study.clone());
    cfg.chains = Some(chains.clone());
    let dir = output_dir(args.common.out.as_ref(), &cfg)?;
    let logs_dir = dir.join("replicas");
    std::fs::create_dir_all(&logs_dir)?;
    let mcmc = McmcFitter { chains };
    let fitter: &dyn Fitter = match cfg.fitter {
        FitterKind::Mcmc => &mcmc,
        FitterKind::Truth => &TruthFitter,
    };
    let progress = |log: &crate::simulate::ReplicaLog| {
        let status = match (&log.error, log.excluded) {
            (Some(e), _) => format!("failed: {e}"),
            (None, true) => format!("excluded (max R-hat {:.3})", log.max_rhat.unwrap_or(f64::NAN)),
            (None, false) => "ok".into(),
        };
        println!("replica {} [{}] {status} in {:.1}s", log.replica, log.variant, log.seconds);
    };
    let result = replicate_study(&sc, &study, fitter, &progress)?;
    let mut outputs = vec!["bias_mse.csv".to_string()];
    for log in &result.logs {
        let name = format!("replica_{:03}_{}.json", log.replica, log.variant);
        write_json(&logs_dir.join(&name), log)?;
        outputs.push(format!("replicas/{name}"));
    }
    let mut w = create(&dir.join("bias_mse.csv"))?;
    result.write_csv(&mut w)?;
    w.flush()?;
    finish(&dir, "replicate", &cfg, start, outputs)?;
    Ok(dir)
}

/// One row of `rhat.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhatRow {
    pub parameter: String,
    pub rhat: Option<f64>,
    pub flagged: bool,
}

pub fn rhat_table(draws: &PosteriorDraws) -> Vec<RhatRow> {
    draws
        .names
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let cols = draws.column(p);
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let r = rhat(&refs).ok();
            RhatRow { parameter: name.clone(), rhat: r, flagged: r.map_or(false, |v| !(v < RHAT_THRESHOLD)) }
        })
        .collect()
}

pub fn cmd_summarize(args: &DrawsArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let draws = read_draws(&args.draws)?;
    let dir = output_dir(args.out.as_ref(), &RunConfig::default())?;
    let summary = summarize_draws(&draws)?;
    write_json(&dir.join("summary.json"), &summary)?;
    println!("summarized {} parameters", draws.names.len());
    finish(&dir, "summarize", &RunConfig::default(), start, vec!["summary.json".into()])?;
    Ok(dir)
}

pub fn cmd_diagnose(args: &DrawsArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let draws = read_draws(&args.draws)?;
    let dir = output_dir(args.out.as_ref(), &RunConfig::default())?;
    let mut outputs = vec!["trace.csv".to_string()];
    if draws.chains.len() < 2 {
        println!("warning: a single chain; R-hat omitted");
    } else {
        let table = rhat_table(&draws);
        let mut w = csv::Writer::from_writer(create(&dir.join("rhat.csv"))?);
        for r in &table {
            w.serialize(r)?;
        }
        w.flush()?;
        let flagged: Vec<&str> = table.iter().filter(|r| r.flagged).map(|r| r.parameter.as_str()).collect();
        if !flagged.is_empty() {
            println!("warning: R-hat >= {RHAT_THRESHOLD} for {}", flagged.join(", "));
        }
        outputs.push("rhat.csv".into());
    }
    let mut w = csv::Writer::from_writer(create(&dir.join("trace.csv"))?);
    w.write_record(["parameter", "chain", "iteration", "value"])?;
    for (p, name) in draws.names.iter().enumerate() {
        for (c, chain) in draws.chains.iter().enumerate() {
            for (k, it) in chain.iterations.iter().enumerate() {
                w.write_record([name.clone(), c.to_string(), it.to_string(), format!("{}", chain.values[k][p])])?;
            }
        }
    }
    w.flush()?;
    finish(&dir, "diagnose", &RunConfig::default(), start, outputs)?;
    Ok(dir)
}

pub fn exit_code(e: &JmError) -> i32 {
    match e {
        JmError::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Replicate(a) => cmd_replicate(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
