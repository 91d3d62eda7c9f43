use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use esolm_cli::config::{ConfigError, RunConfig};
use esolm_cli::inspect::{render, Example, InspectRequest, Phase};
use esolm_cli::{commands, exit_code};
use esolm_core::bias::UnconsumedRows;

#[derive(Parser)]
#[command(name = "esolm", version, about = "Train, sample, evaluate and benchmark hybrid AR / diffusion language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every configurable command.
#[derive(Args)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    /// a or b
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    context_length: Option<String>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Run directory; defaults to $ESOLM_OUTPUT_ROOT/<command>-<config hash>.
    #[arg(long)]
    output: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on a text corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training alpha0.
        #[arg(long)]
        alpha0: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        batch_size: Option<String>,
    },
    /// Generate sequences from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha0_eval: Option<String>,
        /// Diffusion steps T.
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        nucleus: Option<String>,
        #[arg(long)]
        temperature: Option<String>,
        #[arg(long)]
        count: Option<String>,
        /// Use the reference executor instead of the KV cache.
        #[arg(long)]
        no_cache: bool,
    },
    /// Report the perplexity bound of a checkpoint on held-out text.
    EvalPpl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha0_eval: Option<String>,
    },
    /// Print an attention bias for one of the bundled examples.
    InspectBias {
        /// a or b
        #[arg(long, default_value = "b")]
        variant: String,
        #[arg(long, value_enum, default_value = "diffusion")]
        phase: Phase,
        #[arg(long, value_enum, default_value = "six")]
        example: Example,
        /// 1-based sampling step (default: all steps).
        #[arg(long)]
        step: Option<usize>,
        /// Permute rows and columns into the denoising order.
        #[arg(long)]
        sorted: bool,
        /// Leave unconsumed sequential rows empty instead of mirroring their twin.
        #[arg(long)]
        blocked_unconsumed: bool,
    },
    /// Measure query, attention-pair and wall-clock costs of every sampler.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha0_eval: Option<String>,
        /// Comma-separated sequence lengths.
        #[arg(long)]
        lengths: Option<String>,
        /// Comma-separated step counts; 0 means T = L.
        #[arg(long)]
        steps: Option<String>,
        /// Comma-separated modes or `all`.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        repeats: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[(&str, &Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    let flags = [
        ("seed", &common.seed),
        ("variant", &common.variant),
        ("context_length", &common.context_length),
        ("paths.corpus", &common.corpus),
        ("paths.checkpoint", &common.checkpoint),
        ("paths.output", &common.output),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let dir = match cli.command {
        Command::Train {
            common,
            alpha0,
            steps,
            lr,
            batch_size,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("alpha0_train", &alpha0),
                    ("training.steps", &steps),
                    ("training.lr", &lr),
                    ("training.batch_size", &batch_size),
                ],
            )?;
            commands::train(&cfg)?
        }
        Command::Sample {
            common,
            alpha0_eval,
            steps,
            nucleus,
            temperature,
            count,
            no_cache,
        } => {
            let cache = no_cache.then(|| "false".to_string());
            let cfg = resolve(
                &common,
                &[
                    ("alpha0_eval", &alpha0_eval),
                    ("sampling.steps", &steps),
                    ("sampling.nucleus", &nucleus),
                    ("sampling.temperature", &temperature),
                    ("sampling.count", &count),
                    ("sampling.cache", &cache),
                ],
            )?;
            commands::sample(&cfg)?
        }
        Command::EvalPpl { common, alpha0_eval } => {
            let cfg = resolve(&common, &[("alpha0_eval", &alpha0_eval)])?;
            commands::eval_ppl(&cfg)?
        }
        Command::Bench {
            common,
            alpha0_eval,
            lengths,
            steps,
            modes,
            repeats,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("alpha0_eval", &alpha0_eval),
                    ("bench.lengths", &lengths),
                    ("bench.steps", &steps),
                    ("bench.modes", &modes),
                    ("bench.repeats", &repeats),
                ],
            )?;
            commands::bench(&cfg)?
        }
        Command::InspectBias {
            variant,
            phase,
            example,
            step,
            sorted,
            blocked_unconsumed,
        } => {
            let req = InspectRequest {
                variant: variant.parse().map_err(|e: esolm_core::Error| ConfigError(e.to_string()))?,
                phase,
                example,
                step,
                sorted,
                unconsumed: if blocked_unconsumed {
                    UnconsumedRows::Blocked
                } else {
                    UnconsumedRows::Extra
                },
            };
            print!("{}", render(&req)?);
            return Ok(());
        }
    };
    eprintln!("outputs in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
