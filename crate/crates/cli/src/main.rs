//! `pgsvc`: encode, decode, truncate and evaluate layered splat streams.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use commands::Baseline;
use config::{RunConfig, TrainArgs};

#[derive(Parser)]
#[command(name = "pgsvc", version, about = "Progressive layered 2D Gaussian splat codec")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "PGSVC_THREADS")]
    threads: Option<usize>,
    /// More output; repeat for debug logs. `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, quantize and write a `.pgsv` stream (report at `<output>.json`).
    Encode {
        /// PNG file, directory of numbered PNGs, or raw `.yuv` (with --size).
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Render every frame at one level.
    Decode {
        stream: PathBuf,
        /// Level to render; defaults to the highest level in the stream.
        #[arg(long, short)]
        level: Option<usize>,
        /// `.yuv`, `.png`, or a directory for numbered PNGs.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Keep layers `0..=level` of a stream.
    Truncate {
        stream: PathBuf,
        #[arg(long, short)]
        level: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// PSNR / MS-SSIM of each level against reference frames (CSV).
    Eval {
        stream: PathBuf,
        /// PNG, PNG directory, or `.yuv` at the stream's canvas size.
        reference: PathBuf,
        /// Comma-separated levels; all levels by default.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        /// CSV destination; stdout by default.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Budget sweep producing a rate-distortion CSV and gnuplot data files.
    RdCurve {
        input: PathBuf,
        /// Comma-separated total splat budgets.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
        /// Also run a comparison method; may be repeated.
        #[arg(long, value_enum)]
        baseline: Vec<Baseline>,
        #[arg(short, long)]
        output: PathBuf,
        /// Directory for `.dat` files; defaults to the CSV's directory.
        #[arg(long)]
        dat_dir: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

fn init_logging(verbose: u8, configured: Option<&str>) {
    let level = match (verbose, configured) {
        (0, Some(l)) => l,
        (0, None) => "warn",
        (1, _) => "info",
        (2, _) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> Result<(), exit::Failure> {
    match cli.command {
        Command::Encode { input, output, train } => commands::encode(input, output, &train),
        Command::Decode { stream, level, output } => commands::decode(&stream, level, &output),
        Command::Truncate { stream, level, output } => commands::truncate(&stream, level, &output),
        Command::Eval {
            stream,
            reference,
            levels,
            output,
        } => commands::eval(&stream, &reference, levels, output.as_deref()),
        Command::RdCurve {
            input,
            budgets,
            baseline,
            output,
            dat_dir,
            train,
        } => commands::rd_curve(&input, &budgets, &baseline, &output, dat_dir, &train),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors share the generic code so that 2 stays reserved
            // for unreadable input.
            return if e.use_stderr() {
                ExitCode::from(exit::GENERIC)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    // `[run]` settings that must take effect before any work starts.
    let run_section = match &cli.command {
        Command::Encode { train, .. } | Command::RdCurve { train, .. } => match &train.config {
            Some(p) => match RunConfig::from_file(p) {
                Ok(c) => Some(c.run),
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(exit::GENERIC);
                }
            },
            None => None,
        },
        _ => None,
    };
    init_logging(cli.verbose, run_section.as_ref().and_then(|r| r.log_level.as_deref()));
    let threads = cli.threads.or(run_section.and_then(|r| r.threads));
    if let Some(n) = threads {
        if n == 0 {
            error!("--threads must be positive");
            return ExitCode::from(exit::GENERIC);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(exit::GENERIC);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message());
            ExitCode::from(f.code)
        }
    }
}
