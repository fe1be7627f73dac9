//! `sae`: generate data, train, evaluate and inspect sparse autoencoders.

mod commands;
mod config;
mod error;

use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "sae", version, about = "Sparse autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: config `output_dir`, else
    /// $SAE_OUTPUT_ROOT/<config stem>, else runs/<config stem>].
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let config = RunConfig::load(&self.config, &self.overrides)?;
        let out = config.output_dir(self.out.as_deref(), &self.config);
        Ok((config, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic training, evaluation and ground-truth activation files.
    GenData(RunArgs),
    /// Train a model; writes config.used, history.tsv and checkpoint.bin.
    Train(RunArgs),
    /// Evaluate a checkpoint; writes report.txt and histogram.tsv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to load [default: <out>/checkpoint.bin].
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized model instead; writes
        /// report.untrained.txt and histogram.untrained.tsv.
        #[arg(long)]
        untrained: bool,
    },
    /// Sparsemax of each input line: values, threshold τ, support size k.
    Project {
        /// File with one vector per line [default: stdin].
        input: Option<PathBuf>,
    },
    /// Recommend a TopK K from a sparsemax run's mean support size.
    SuggestK {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge run directories into plot-ready tables.
    Report {
        /// Run directories holding history.tsv and/or report.txt.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn default_checkpoint(flag: Option<PathBuf>, out: &Path) -> PathBuf {
    flag.unwrap_or_else(|| out.join(commands::CHECKPOINT))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => {
            let (config, out) = args.load()?;
            for path in commands::gen_data(&config, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Train(args) => {
            let (config, out) = args.load()?;
            let outcome = commands::train_cmd(&config, &out)?;
            if let Some(last) = outcome.history.records.last() {
                eprintln!(
                    "step {}: loss {:.6}, mean L0 {:.3}, dead {}",
                    last.step, last.loss, last.mean_l0, last.dead_count
                );
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Eval {
            run,
            checkpoint,
            untrained,
        } => {
            let (config, out) = run.load()?;
            let report = if untrained {
                commands::eval_cmd(&config, &out, None, "untrained")?
            } else {
                let ckpt = default_checkpoint(checkpoint, &out);
                commands::eval_cmd(&config, &out, Some(&ckpt), "")?
            };
            let text = report.to_text();
            print!("{}", text.split("\n[").next().unwrap_or_default());
            println!();
        }
        Command::Project { input } => {
            let stdout = io::stdout().lock();
            match input {
                Some(path) => {
                    let f = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
                    commands::project(BufReader::new(f), stdout)?;
                }
                None => {
                    commands::project(io::stdin().lock(), stdout)?;
                }
            }
        }
        Command::SuggestK { run, checkpoint } => {
            let (config, out) = run.load()?;
            let ckpt = default_checkpoint(checkpoint, &out);
            print!(
                "{}",
                commands::suggest_k_cmd(&config, &out, &ckpt)?.to_text()
            );
        }
        Command::Report { runs, out } => {
            for path in commands::report_cmd(&runs, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sae: {e}");
            e.exit_code()
        }
    }
}
