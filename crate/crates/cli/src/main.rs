use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use tro_cli::commands::{self, Inputs};
use tro_cli::output::Manifest;
use tro_cli::{CliError, CliResult, ExperimentConfig};

/// Topology-aware robust optimization experiments.
#[derive(Debug, Parser)]
#[command(name = "tro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or load a dataset; write data.csv and topology.json.
    GenData(Common),
    /// Build the topology graph and prior.
    Topology(WithData),
    /// Train one method and report on the test groups.
    Train(WithData),
    /// Train over a hyperparameter grid and select by validation metric.
    Sweep(WithData),
    /// Evaluate a checkpoint on the test groups.
    Eval(WithData),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel sweep cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct WithData {
    #[command(flatten)]
    common: Common,
    /// Directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// prior.json written by topology.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// checkpoint.json written by train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn init_logging() -> CliResult<()> {
    let level = std::env::var("TRO_OPT_LOG").unwrap_or_else(|_| "warn".into());
    if !matches!(level.as_str(), "error" | "warn" | "info" | "debug") {
        return Err(CliError::Config(format!(
            "TRO_OPT_LOG must be one of error, info, debug; got {level:?}"
        )));
    }
    let filter = EnvFilter::new(format!("tro_core={level},tro_cli={level},tro={level}"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    Ok(())
}

fn load_config(common: &Common) -> CliResult<(ExperimentConfig, Option<Manifest>)> {
    let (mut config, manifest) = match &common.config {
        Some(path) => {
            let config = ExperimentConfig::load(path)?;
            let manifest = Manifest::load(path).ok();
            (config, manifest)
        }
        None => (ExperimentConfig::parse("")?, None),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
        config.sweep.seeds.clear();
    }
    Ok((config.resolve()?, manifest))
}

fn run(cli: Cli) -> CliResult<()> {
    init_logging()?;
    let (common, inputs) = match cli.command {
        Command::GenData(c) => {
            let (config, _) = load_config(&c)?;
            commands::gen_data(&config, &c.out)?;
            return Ok(());
        }
        Command::Topology(ref w) | Command::Train(ref w) | Command::Sweep(ref w) | Command::Eval(ref w) => (
            &w.common,
            Inputs {
                data: w.data.clone(),
                prior: w.prior.clone(),
                checkpoint: w.checkpoint.clone(),
            },
        ),
    };
    let (config, manifest) = load_config(common)?;
    let inputs = match &manifest {
        Some(m) => inputs.or_from_manifest(m),
        None => inputs,
    };
    let out = &common.out;
    match cli.command {
        Command::GenData(_) => unreachable!(),
        Command::Topology(_) => commands::topology(&config, &inputs, out)?,
        Command::Train(_) => commands::train(&config, &inputs, out)?,
        Command::Sweep(_) => commands::sweep(&config, &inputs, out, common.jobs)?,
        Command::Eval(_) => commands::eval(&config, &inputs, out)?,
    };
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
