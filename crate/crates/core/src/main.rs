use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use cgct::config::ExperimentConfig;
use cgct::curriculum::Variant;
use cgct::experiment::{build_task, evaluate, export_embeddings, format_summary, run_experiment, sweep_configs};
use cgct::model::Checkpoint;
use cgct::{Error, Result};

#[derive(Parser)]
#[command(name = "cgct", version, about = "Multi-target domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run only this variant.
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured variant and seed.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the configured task.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Write feature-extractor embeddings of all evaluation samples as CSV.
    ExportEmbeddings { checkpoint: PathBuf, config: PathBuf },
    /// Run every `.cfg` file in a directory.
    Sweep { dir: PathBuf },
}

fn load(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::from_path(path)?;
    if let Some(s) = o.seed {
        c.seeds = vec![s];
    }
    if let Some(out) = &o.out {
        c.output_dir = out.clone();
    }
    if let Some(v) = &o.variant {
        c.variants = vec![v.parse::<Variant>()?];
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let o = &cli.overrides;
    match &cli.command {
        Command::Train { config } => {
            let c = load(config, o)?;
            let rows = run_experiment(&c)?;
            print!("{}", format_summary(&rows));
        }
        Command::Eval { checkpoint, config } => {
            let c = load(config, o)?;
            let ck = Checkpoint::load(checkpoint)?;
            let task = build_task(&c.task, c.seeds[0])?;
            let m = evaluate(&ck.bundle, &task)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::ExportEmbeddings { checkpoint, config } => {
            let c = load(config, o)?;
            let ck = Checkpoint::load(checkpoint)?;
            let task = build_task(&c.task, c.seeds[0])?;
            let path = c.output_dir.join("embeddings.csv");
            let rows = export_embeddings(&ck.bundle, &task, &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::Sweep { dir } => {
            let mut all = Vec::new();
            for path in sweep_configs(dir)? {
                let c = load(&path, o)?;
                all.extend(run_experiment(&c)?);
            }
            print!("{}", format_summary(&all));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
