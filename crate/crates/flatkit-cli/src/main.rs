//! flatkit command line: gen | calibrate | eval | overhead.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O error. `FLATKIT_THREADS` caps internal parallelism; every command
//! is deterministic under a fixed seed.

mod commands;

use clap::{Parser, Subcommand};
use flatkit::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "flatkit",
    about = "Learnable Kronecker-factored transforms for low-bit quantization on synthetic tiny transformers",
    long_about = None,
    after_help = "CSV schemas:\n  \
        trace.csv:     epoch,block,loss,flatness   (one row per epoch per block)\n  \
        landscape.csv: layer,token,mse             (layers x tokens rows)\n  \
        flatness.csv:  block,tensor,channels,flatness (one row per tensor)\n\
        summary.json carries the same numbers for machine consumption.\n\
        FLATKIT_THREADS caps the worker-thread count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a random tiny model and calibration data with planted
    /// outliers; writes model.fkc and data.fkc into --out.
    Gen {
        /// Run configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed; overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate transforms block-wise on a model + data pair; writes
    /// transforms.fkc and trace.csv into --out.
    Calibrate {
        /// Model container from `gen`.
        model: PathBuf,
        /// Data container from `gen`.
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a transform variant under a quantization mode: block MSE,
    /// flatness reports, and the (layer, token) error landscape.
    Eval {
        /// Model container.
        model: PathBuf,
        /// Data container.
        data: PathBuf,
        /// Calibrated transform container (required for --transform flat).
        #[arg(long)]
        transforms: Option<PathBuf>,
        /// Quantization mode.
        #[arg(long, default_value = "w4a4kv4")]
        mode: String,
        /// Transform variant: identity | scaling | hadamard | flat.
        #[arg(long, default_value = "identity")]
        transform: String,
        /// Report directory (landscape.csv, flatness.csv, summary.json).
        #[arg(long)]
        report: PathBuf,
    },
    /// Print FLOPs/memory overhead accounting and fused-kernel case
    /// decisions for a dimension sweep.
    Overhead {
        /// Run configuration; its model dims are appended to the sweep.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArg(_) => 2,
        Error::Numerical(_) | Error::Diverged { .. } | Error::Detached(_) | Error::Dim(_) => 3,
        Error::Container(_) | Error::Io(_) => 4,
    }
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("FLATKIT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("FLATKIT_THREADS must be a number, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config("FLATKIT_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen { config, seed, out } => commands::gen(config.as_deref(), seed, &out),
        Command::Calibrate { model, data, config, seed, out } => {
            commands::calibrate(&model, &data, config.as_deref(), seed, &out)
        }
        Command::Eval { model, data, transforms, mode, transform, report } => {
            commands::eval(&model, &data, transforms.as_deref(), &mode, &transform, &report)
        }
        Command::Overhead { config } => commands::overhead(config.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
