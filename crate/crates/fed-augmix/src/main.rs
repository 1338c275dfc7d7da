use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fed_augmix::config::{load_config, ExperimentConfig, Stage};
use fed_augmix::error::Result;
use fed_augmix::runner;

#[derive(Parser)]
#[command(
    name = "fed-augmix",
    about = "Federated learning testbed: AugMix-based defense vs gradient inversion"
)]
struct Cli {
    /// Experiment config file (flat `section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force bit-reproducible logs (serial clients, zeroed wall times).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one federation per severity in the sweep.
    Train,
    /// Attack replayed local updates; defaults to every (stage, severity) cell.
    Attack {
        /// untrained or convergent
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        severity: Option<f64>,
    },
    /// Aggregate attack records into defense and trade-off CSVs.
    Report,
    /// Print the non-IID client partition as CSV.
    PartitionInspect,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.federation.seed = seed;
    }
    if cli.deterministic {
        cfg.federation.deterministic = true;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Train => runner::cmd_train(&cfg),
        Command::Attack { stage, severity } => match (stage, severity) {
            (Some(s), Some(sev)) => runner::cmd_attack(&cfg, Stage::parse(s)?, *sev),
            (None, None) => runner::cmd_attack_all(&cfg),
            _ => Err(fed_augmix::error::Error::config(
                "attack needs both --stage and --severity, or neither",
            )),
        },
        Command::Report => runner::cmd_report(&cfg),
        Command::PartitionInspect => {
            print!("{}", runner::cmd_partition_inspect(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fed-augmix: {e}");
            ExitCode::FAILURE
        }
    }
}
