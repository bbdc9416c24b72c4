//! Pipeline CLI. Each subcommand runs one stage against the artifacts in
//! the output directory; `all` chains them. Log verbosity comes from the
//! SSLSEG_LOG environment variable (error, warn, info, debug).

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sslseg_core::pipeline::{self, Stage};
use sslseg_core::targets::LossKind;
use sslseg_core::PipelineConfig;

#[derive(Parser)]
#[command(name = "sslseg", about = "Semi-supervised building-detection pipeline", version)]
struct Cli {
    /// TOML config file; defaults apply for every missing field.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the fine-tuning loss (mse, mae, manif, smir, safer, weiave).
    #[arg(long, global = true)]
    loss: Option<String>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (scene.bsr + truth.msk) into the output directory.
    Synth,
    /// Compute normalization statistics and the labeled/unlabeled/test split.
    Features,
    /// Layerwise autoencoder pretraining of the encoder stack.
    Pretrain,
    /// Head warm-up, soft-target assembly, and full-network fine-tuning.
    Finetune,
    /// Classify every pixel of the input stack.
    Predict,
    /// Majority-vote and erode the binary building mask.
    Postprocess,
    /// Score predictions against the ground truth.
    Evaluate {
        /// Compare finished runs instead: print a ranking table across
        /// their metrics.kv files.
        #[arg(long, num_args = 1.., value_name = "DIR")]
        compare: Option<Vec<PathBuf>>,
    },
    /// Run every stage in order (features through evaluate).
    All,
    /// Print the fully-defaulted configuration as TOML.
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(loss) = &cli.loss {
        cfg.finetune.loss = LossKind::parse(loss)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SSLSEG_LOG"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if let Command::Evaluate {
        compare: Some(dirs),
    } = &cli.command
    {
        print!("{}", pipeline::compare_report(dirs)?);
        return Ok(());
    }

    let cfg = load_config(&cli)?;
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::Features => Stage::Features,
        Command::Pretrain => Stage::Pretrain,
        Command::Finetune => Stage::Finetune,
        Command::Predict => Stage::Predict,
        Command::Postprocess => Stage::Postprocess,
        Command::Evaluate { .. } => Stage::Evaluate,
        Command::All => {
            let report = pipeline::run_all(&cfg)?;
            print!("{}", report.table);
            return Ok(());
        }
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    if let Some(report) = pipeline::run_stage(&cfg, stage)? {
        print!("{}", report.table);
    }
    Ok(())
}
