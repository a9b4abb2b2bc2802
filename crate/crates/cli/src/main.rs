use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use gendrop_cli::config::ExperimentConfig;
use gendrop_cli::run::{self, config_base, load_data, parse_thresholds};

#[derive(Parser)]
#[command(name = "gendrop", version, about = "Generalized Dropout experiments: train, prune, sweep, inspect gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network; writes metrics.csv, gates.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Remove low-gate units from a checkpoint; writes report.txt,
    /// histogram.csv and pruned.ckpt.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// "auto" or e.g. "conv1=0.5,fc1=0.3". Overrides the config's [prune] section.
        #[arg(long)]
        thresholds: Option<String>,
        /// Config whose [data] supplies the test set for the error columns.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write folded.ckpt with gates multiplied into the next layer.
        #[arg(long)]
        fold: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One training run per value of the config's [sweep]; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print (or write to <out>/gates.csv) the gate values of a checkpoint.
    GateDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let stdout = io::stdout();
    let mut log = stdout.lock();
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            run::run_train(&cfg, &config_base(&config), seed, &out, &mut log)?;
            writeln!(log, "wrote {}", out.display())?;
        }
        Command::Sweep { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            run::run_sweep(&cfg, &config_base(&config), seed, &out, &mut log)?;
            writeln!(log, "wrote {}", out.join(run::SWEEP_FILE).display())?;
        }
        Command::Prune {
            checkpoint,
            thresholds,
            config,
            fold,
            out,
        } => {
            let cfg = config.as_ref().map(|p| ExperimentConfig::load(p)).transpose()?;
            let from_cfg = cfg.as_ref().and_then(|c| c.prune.clone()).unwrap_or_default();
            let th = match thresholds {
                Some(s) => parse_thresholds(&s).context("--thresholds")?,
                None => from_cfg.thresholds,
            };
            let test = match (&cfg, &config) {
                (Some(c), Some(p)) => Some(load_data(&c.data, &config_base(p))?.1),
                _ => None,
            };
            let outcome = run::run_prune(&checkpoint, &th, fold || from_cfg.fold, test.as_ref(), &out)?;
            write!(log, "{}", outcome.report.to_table())?;
        }
        Command::GateDump { checkpoint, out } => match out {
            Some(dir) => {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join(run::GATES_FILE);
                let mut f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                run::run_gate_dump(&checkpoint, &mut f)?;
            }
            None => run::run_gate_dump(&checkpoint, &mut log)?,
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
