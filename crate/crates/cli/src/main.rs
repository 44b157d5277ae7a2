//! `volta`: generate phantoms, pretrain, evaluate and inspect artifacts.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
//! (I/O, malformed input, shape mismatch), 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use volta_core::downstream::DownstreamError;
use volta_core::numcore::NumError;
use volta_core::ssl::SslError;
use volta_core::train::TrainError;
use volta_core::vit3d::ModelError;

use config::UsageError;

#[derive(Parser)]
#[command(name = "volta", version, about = "Self-supervised 3D ViT pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment TOML file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; shorthand for `--set output=DIR`.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms, label maps and manifest.csv.
    GenData(ConfigArgs),
    /// Run self-supervised pretraining and write checkpoints.
    Pretrain(ConfigArgs),
    /// Linear-probe classification with a label-fraction sweep.
    Probe(ConfigArgs),
    /// Fine-tune a segmentation head with cross-validation.
    Segment(ConfigArgs),
    /// Summarise a checkpoint, raw volume or NIfTI file.
    Inspect { path: PathBuf },
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<config::ExperimentConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(o) = &args.output {
        overrides.push(format!("output={}", toml_string(&o.to_string_lossy())));
    }
    config::load(args.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&resolve(&a)?),
        Command::Pretrain(a) => commands::pretrain(&resolve(&a)?),
        Command::Probe(a) => commands::probe(&resolve(&a)?),
        Command::Segment(a) => commands::segment(&resolve(&a)?),
        Command::Inspect { path } => commands::inspect(&path),
    }
}

// Transparent wrappers forward `source()` past themselves, so the chain never
// yields the inner error; unwrap them by variant instead.
fn num_is_numeric(e: &NumError) -> bool {
    matches!(e, NumError::NonFinite { .. })
}

fn model_is_numeric(e: &ModelError) -> bool {
    matches!(e, ModelError::Num(n) if num_is_numeric(n))
}

fn ssl_is_numeric(e: &SslError) -> bool {
    match e {
        SslError::Num(n) => num_is_numeric(n),
        SslError::Model(m) => model_is_numeric(m),
        _ => false,
    }
}

fn train_is_numeric(e: &TrainError) -> bool {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_) => true,
        TrainError::Num(n) => num_is_numeric(n),
        TrainError::Model(m) => model_is_numeric(m),
        TrainError::Ssl(s) => ssl_is_numeric(s),
        _ => false,
    }
}

fn is_numeric(e: &(dyn std::error::Error + 'static)) -> bool {
    if let Some(d) = e.downcast_ref::<DownstreamError>() {
        return match d {
            DownstreamError::NonFinite(_) => true,
            DownstreamError::Num(n) => num_is_numeric(n),
            DownstreamError::Model(m) => model_is_numeric(m),
            DownstreamError::Train(t) => train_is_numeric(t),
            _ => false,
        };
    }
    e.downcast_ref::<TrainError>().is_some_and(train_is_numeric)
        || e.downcast_ref::<SslError>().is_some_and(ssl_is_numeric)
        || e.downcast_ref::<ModelError>().is_some_and(model_is_numeric)
        || e.downcast_ref::<NumError>().is_some_and(num_is_numeric)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        1
    } else if err.chain().any(is_numeric) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
