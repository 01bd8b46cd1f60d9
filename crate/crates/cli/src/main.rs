//! `outagekit` — outage impact-scope assessment and summary generation
//! over an embedded line-delimited store.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use outagekit_cli::app::AppError;
use outagekit_cli::commands;
use outagekit_cli::config::AppConfig;

#[derive(Parser)]
#[command(name = "outagekit", version, about = "Outage understanding toolkit")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest line-delimited incident/outage/link records into the store.
    Ingest {
        /// Input file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
    /// Generate a calibrated synthetic corpus with planted ground truth.
    Synth {
        /// Corpus output file, or `-` for stdout.
        #[arg(long, default_value = "corpus.jsonl")]
        output: PathBuf,
        /// Optional ground-truth output file.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Number of outages to generate.
        #[arg(long)]
        outages: Option<usize>,
        /// Master RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split a corpus chronologically into train/validation/test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "splits")]
        out_dir: PathBuf,
        /// Comma-separated ratios, e.g. 0.7,0.1,0.2.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Assess impact scope for stored outages and persist the results.
    Link {
        /// Train the similarity model from stored links first.
        #[arg(long)]
        train: bool,
        /// Only assess outages in the ACTIVE state.
        #[arg(long)]
        active_only: bool,
        /// Negatives sampled per positive when training.
        #[arg(long, default_value_t = 3)]
        negative_ratio: usize,
        /// RNG seed for negative sampling.
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
    /// Generate summary or title candidates for one outage.
    Summarize {
        #[arg(long)]
        outage: String,
        /// summary, title, or summary-given-title.
        #[arg(long, default_value = "summary")]
        mode: String,
        /// Include the outage title in a summary context.
        #[arg(long)]
        use_title: bool,
        /// Number of candidates (default from config).
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Export fine-tuning records as line-delimited context/completion pairs.
    ExportFinetune {
        #[arg(long, default_value = "finetune.jsonl")]
        output: PathBuf,
        #[arg(long, default_value = "summary")]
        mode: String,
        #[arg(long)]
        use_title: bool,
        /// train, validation, test, or all.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Score systems on the test split and print a metric table.
    Eval {
        /// Comma-separated systems: mock, ir, concat, remote.
        #[arg(long, default_value = "mock,ir,concat")]
        systems: String,
        #[arg(long, default_value = "summary")]
        mode: String,
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Print corpus study statistics as JSON.
    Stats,
    /// Run the HTTP service with periodic scope assessment.
    Serve {
        /// Listen address override, e.g. 127.0.0.1:8797.
        #[arg(long)]
        addr: Option<String>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<AppConfig, AppError> {
    match path {
        Some(path) => Ok(AppConfig::load(path)?),
        None => {
            let config = AppConfig::default();
            config.validate()?;
            Ok(config)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let config = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Ingest { input } => commands::ingest(&config, &input),
        Command::Synth {
            output,
            truth,
            outages,
            seed,
        } => commands::synth(&output, truth.as_deref(), outages, seed),
        Command::Split {
            input,
            out_dir,
            ratios,
        } => commands::split(&input, &out_dir, ratios.as_deref()),
        Command::Link {
            train,
            active_only,
            negative_ratio,
            seed,
        } => commands::link(&config, train, active_only, negative_ratio, seed),
        Command::Summarize {
            outage,
            mode,
            use_title,
            n,
        } => commands::summarize(&config, &outage, &mode, use_title, n),
        Command::ExportFinetune {
            output,
            mode,
            use_title,
            split,
        } => commands::export(&config, &output, &mode, use_title, &split),
        Command::Eval { systems, mode, n } => commands::eval(&config, &systems, &mode, n),
        Command::Stats => commands::stats(&config),
        Command::Serve { addr } => commands::serve(config, addr),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
