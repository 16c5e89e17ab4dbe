use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phyprobe_harness::cache::Cache;
use phyprobe_harness::report::{emit_report, Format, MetricsReport};
use phyprobe_harness::{run_pipeline, ExperimentConfig, HarnessError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "phyprobe", version, about = "Probe world models of physical systems without touching them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force deterministic mode.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stages to run with `run` (repeatable); all when omitted.
    #[arg(long = "stage", global = true)]
    stages: Vec<String>,
    /// Output formats (repeatable); json and csv when omitted.
    #[arg(long = "format", global = true, value_parser = ["json", "csv"])]
    formats: Vec<String>,
    /// Recompute everything instead of reading the artifact cache.
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the SSL, probe, fine-tuning and OOD datasets.
    GenData,
    /// Train the world model.
    Train,
    /// Layer scan and baseline probes on the frozen model.
    Probe,
    /// Last-layer and full fine-tuning.
    Finetune,
    /// CKA, drift, erasure and projections.
    Analyze,
    /// Symbolic regression on the probe outputs.
    Symreg,
    /// Error-bound sweep on the oscillator.
    Bound,
    /// Re-emit a stored report.json in the requested formats.
    Report,
    /// Run the requested stages (default: all).
    Run,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn formats(c: &Common) -> Result<Vec<Format>, HarnessError> {
    if c.formats.is_empty() {
        return Ok(vec![Format::Json, Format::Csv]);
    }
    c.formats.iter().map(|f| f.parse()).collect()
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli.common)?;
    let formats = formats(&cli.common)?;
    let single = match cli.command {
        Command::GenData => Some(Stage::GenData),
        Command::Train => Some(Stage::Train),
        Command::Probe => Some(Stage::Probe),
        Command::Finetune => Some(Stage::Finetune),
        Command::Analyze => Some(Stage::Analyze),
        Command::Symreg => Some(Stage::Symreg),
        Command::Bound => Some(Stage::Bound),
        Command::Report => {
            let path = cfg.out_dir.join("report.json");
            let report = MetricsReport::from_json(&std::fs::read(&path)?)?;
            for p in emit_report(&report, &cfg.out_dir, &formats)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Command::Run => None,
    };
    if let Some(s) = single {
        cfg.stages = vec![s];
    } else if !cli.common.stages.is_empty() {
        cfg.stages = cli.common.stages.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    let mut opts = RunOptions::for_config(&cfg);
    if cli.common.no_cache {
        opts.cache = Cache::disabled();
    }
    let (report, result) = run_pipeline(&cfg, &opts);
    for p in emit_report(&report, &cfg.out_dir, &formats)? {
        println!("{}", p.display());
    }
    for (stage, status) in &report.stages {
        eprintln!("{stage}: {status:?}");
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
