//! `bandsplit`: synthesize data, train, enhance and evaluate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 audio/file format error,
//! 4 checkpoint or prerequisite error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use bandsplit::enhance::{AidMode, ConditionKind};
use bandsplit::par::Exec;
use bandsplit::synth::toy::NoiseKind;
use clap::{Parser, Subcommand};

use commands::{ToyArgs, TrainRun};
use config::RunConfig;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bandsplit", version, about = "Two-step band-split 48 kHz speech enhancement")]
struct Cli {
    /// Run configuration (`key = value` lines); required by `train`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration; for `synth`, salts record seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores; 1 runs sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write noisy/target pairs and an augmented manifest.
    Synth {
        /// Source manifest (speech, noise, rir, snr_db, eq_seed, split).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Generate a toy corpus with this many training files instead.
        #[arg(long)]
        toy_train: Option<usize>,
        #[arg(long, default_value_t = 0)]
        toy_val: usize,
        #[arg(long, default_value_t = 0)]
        toy_test: usize,
        #[arg(long, default_value_t = 6.0)]
        toy_seconds: f64,
        #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
        snr_min: f64,
        #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
        snr_max: f64,
        /// Toy noise shape: flat | low-heavy.
        #[arg(long, default_value = "low-heavy")]
        noise: NoiseKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network named by the config's `target`.
    Train,
    /// Enhance a 48 kHz file, or every .wav in a directory.
    Enhance {
        /// FFT768 | Mel48 | Mel64 | Mel80 | TS_FFT768_e16k | TS_FFT768 | TS_FFT768_n16k
        #[arg(long)]
        condition: ConditionKind,
        /// One checkpoint, or wideband then highband for two-step conditions.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Override the two-step aid mode: e16k | none | n16k.
        #[arg(long)]
        aid: Option<AidMode>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Wideband/highband/fullband SiSNR and SDR of paired files.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-bin SNR with 95% confidence bounds over paired clean/noise files.
    Fsnr {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let exec = match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    match cli.command {
        Command::Synth { manifest, toy_train, toy_val, toy_test, toy_seconds, snr_min, snr_max, noise, out } => {
            let toy = toy_train.map(|train| ToyArgs {
                train,
                val: toy_val,
                test: toy_test,
                seconds: toy_seconds,
                snr_min,
                snr_max,
                noise,
            });
            commands::synth(manifest.as_deref(), toy.as_ref(), &out, cli.seed.unwrap_or(0), exec)
        }
        Command::Train => {
            let path = cli.config.ok_or_else(|| CliError::Config("train needs --config".into()))?;
            let mut rc = RunConfig::load(&path)?;
            if let Some(seed) = cli.seed {
                rc.set("seed", &seed.to_string());
            }
            let run = TrainRun::from_config(rc)?;
            commands::train(&run, exec)
        }
        Command::Enhance { condition, checkpoints, aid, input, output } => {
            commands::enhance(condition, &checkpoints, aid, &input, &output, exec)
        }
        Command::Evaluate { reference, estimate, output } => {
            commands::evaluate(&reference, &estimate, output.as_deref(), exec)
        }
        Command::Fsnr { clean, noise, output } => commands::fsnr_cmd(&clean, &noise, output.as_deref(), exec),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
