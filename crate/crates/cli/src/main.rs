//! fedqc: reproducible experiment harness for the federated data quality
//! control pipeline.
//!
//! Every subcommand composes the pipeline from one versioned config file;
//! scalar flags override config values for sweeps. Exit codes: 0 success,
//! 2 config error, 3 data error, 4 numerical divergence, 5 protocol error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedqc::error::Error;
use fedqc::experiment::{
    cmd_ablate_selection, cmd_corrupt, cmd_evaluate, cmd_filter, cmd_gen_data, cmd_run, cmd_score,
    cmd_sweep, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "fedqc",
    version,
    about = "Federated data quality control simulator"
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default config to stdout or a file.
    InitConfig {
        /// Destination path; stdout when omitted.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Synthesize the corpus: vocabulary, corrupted training pool, clean splits.
    GenData,
    /// Apply the configured corruption mixture to a clean dataset file.
    Corrupt {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a dataset against a checkpoint, writing a score dump.
    Score {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Apply the configured selection principle to a score dump.
    Filter {
        #[arg(long)]
        scores: PathBuf,
        /// Anchor threshold from a prior run (anchor principle only).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        kept: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the full two-phase pipeline: score, filter, federated training.
    Run,
    /// Compare the three selection principles per seed.
    AblateSelection {
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Unfiltered runs across corruption proportions.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4])]
        proportions: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Confusion of a kept-id file and/or perplexity of a checkpoint.
    Evaluate {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        kept: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            return Err(Error::config(
                "--config PATH is required (use `fedqc init-config` for a starting point)",
            ))
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let quiet = cli.quiet;
    let say = |msg: String| {
        if !quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::InitConfig { path } => {
            let echo = ExperimentConfig::default_config().echo();
            match path {
                Some(path) => {
                    fedqc::experiment::atomic_write(path, echo.as_bytes())?;
                    say(format!("wrote default config to {}", path.display()));
                }
                None => print!("{echo}"),
            }
            Ok(())
        }
        Command::GenData => {
            let config = load_config(cli)?;
            let out = cmd_gen_data(&config)?;
            say(format!(
                "wrote dataset to {} (vocab, pretrain, validation, anchors alongside)",
                out.dataset_path.display()
            ));
            Ok(())
        }
        Command::Corrupt {
            vocab,
            input,
            output,
        } => {
            let config = load_config(cli)?;
            cmd_corrupt(&config, vocab, input, output)?;
            say(format!("wrote corrupted dataset to {}", output.display()));
            Ok(())
        }
        Command::Score {
            vocab,
            dataset,
            checkpoint,
            output,
        } => {
            let config = load_config(cli)?;
            let count = cmd_score(&config, vocab, dataset, checkpoint, output)?;
            say(format!("scored {count} samples into {}", output.display()));
            Ok(())
        }
        Command::Filter {
            scores,
            threshold,
            kept,
            report,
        } => {
            let config = load_config(cli)?;
            let outcome = cmd_filter(&config, scores, *threshold, kept, report)?;
            say(format!(
                "kept {} of {} samples",
                outcome.kept,
                outcome.kept + outcome.dropped
            ));
            Ok(())
        }
        Command::Run => {
            let config = load_config(cli)?;
            let out = cmd_run(&config)?;
            say(format!(
                "final validation perplexity {:.4} after {} rounds (report: {})",
                out.report.final_perplexity,
                out.report.per_round_perplexity.len(),
                out.report_json.display()
            ));
            Ok(())
        }
        Command::AblateSelection { seeds } => {
            let config = load_config(cli)?;
            let seeds = if seeds.is_empty() {
                vec![config.seed]
            } else {
                seeds.clone()
            };
            let rows = cmd_ablate_selection(&config, &seeds)?;
            for row in &rows {
                say(format!(
                    "seed {} {} {}: kept {} low-quality {}",
                    row.seed,
                    row.method.as_str(),
                    row.principle,
                    row.kept,
                    row.kept_low_quality_proportion
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "undefined".into()),
                ));
            }
            Ok(())
        }
        Command::Sweep { proportions, seeds } => {
            let config = load_config(cli)?;
            let seeds = if seeds.is_empty() {
                vec![config.seed]
            } else {
                seeds.clone()
            };
            let rows = cmd_sweep(&config, proportions, &seeds)?;
            for row in &rows {
                say(format!(
                    "proportion {:.2} seed {}: final perplexity {:.4}",
                    row.proportion, row.seed, row.final_perplexity
                ));
            }
            Ok(())
        }
        Command::Evaluate {
            vocab,
            dataset,
            kept,
            checkpoint,
            output,
        } => {
            let report = cmd_evaluate(
                vocab,
                dataset,
                kept.as_deref(),
                checkpoint.as_deref(),
                output,
            )?;
            if let Some(ppl) = report.validation_perplexity {
                say(format!("validation perplexity {ppl:.4}"));
            }
            if let Some(ratio) = report.kept_low_quality_proportion {
                say(format!(
                    "kept low-quality proportion {}",
                    ratio
                        .value
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "undefined".into())
                ));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
