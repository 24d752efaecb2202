//! `kws`: dataset preparation, supernet training, subnet search, QAT, int8
//! export, evaluation, MFCC features and cost reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, UsageError};

#[derive(Parser)]
#[command(
    name = "kws",
    version,
    about = "Raw-audio keyword spotting with an elastic Conv1D supernet"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the example cache from Speech Commands or synthetic tones.
    Prepare {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generate N_CLASSES × N_PER_CLASS synthetic clips instead.
        #[arg(long, num_args = 2, value_names = ["N_CLASSES", "N_PER_CLASS"])]
        synthetic: Option<Vec<usize>>,
        /// Comma-separated keywords kept as classes (default: the ten commands).
        #[arg(long, value_delimiter = ',')]
        keywords: Option<Vec<String>>,
        /// Cap Unknown at this multiple of the mean keyword count per split.
        #[arg(long)]
        unknown_cap: Option<f64>,
    },
    /// Progressive-shrinking supernet training.
    TrainSupernet {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch CSV (default: <out>.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint at its recorded stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evolutionary subnet search under the weight-memory constraint.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        constraint_bytes: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-generation JSON lines (default: <out>.jsonl).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Quantization-aware training of a subnet and int8 export.
    Qat {
        #[arg(long)]
        ckpt: PathBuf,
        /// Subnet spec JSON, or a search report.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch CSV (default: <out>.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy and confusion matrix of an int8 model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// MFCC features of a WAV file as CSV (one row per frame).
    Mfcc {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAC, parameter and byte report of a subnet spec.
    Cost {
        /// Subnet spec JSON or search report (default: the largest subnet).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Validate an int8 model and write it as KWSQ0001 or JSON.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::ExportFormat::Kwsq)]
        format: commands::ExportFormat,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("KWS_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                config::usage(format!("KWS_THREADS={v:?} is not a positive integer"))
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let o = &cli.overrides;
    match cli.command {
        Command::Prepare {
            data,
            synthetic,
            keywords,
            unknown_cap,
        } => commands::prepare(o, data, synthetic, keywords, unknown_cap),
        Command::TrainSupernet { out, log, resume } => {
            commands::train_supernet(o, out, log, resume)
        }
        Command::Search {
            ckpt,
            constraint_bytes,
            out,
            history,
        } => commands::search(o, &ckpt, constraint_bytes, out, history),
        Command::Qat {
            ckpt,
            spec,
            out,
            log,
        } => commands::qat(o, &ckpt, &spec, out, log),
        Command::Eval { model, split } => commands::eval(o, &model, &split),
        Command::Mfcc { wav, out } => commands::mfcc(&wav, &out),
        Command::Cost { spec } => commands::cost(o, spec.as_deref()),
        Command::Export { model, out, format } => commands::export(&model, &out, format),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(
                c.downcast_ref::<kws_core::Error>(),
                Some(kws_core::Error::Config(_))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
