//! `iodkit`: incremental object detection experiments from the command line.

mod ablate;
mod config;
mod eval;
mod exemplars;
mod output;
mod plot;
mod split;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use iodkit::exemplar::MarginalUnit;
use iodkit::protocol::ProtocolMode;

#[derive(Debug, Parser)]
#[command(name = "iodkit", version, about = "Incremental object detection toolkit")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Protocol {
    Strict,
    Traditional,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Unit {
    Annotations,
    Images,
}

fn parse_fractions(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

fn parse_ids(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a COCO file into incremental phases.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Category blocks, e.g. "70+10", "40+40" or "40+10x4".
        #[arg(long)]
        setup: String,
        #[arg(long, value_enum, default_value = "strict")]
        mode: Protocol,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-phase image fractions for strict splits, e.g. "0.5,0.5".
        #[arg(long, value_parser = parse_fractions)]
        // Spelled out so clap keeps one comma-separated value instead of many.
        sample_fractions: Option<std::vec::Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every phase of a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Print the resolved configuration and exit without writing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a checkpoint or an external detection dump.
    Eval {
        /// Ground-truth COCO file; with --checkpoint it replaces the configured test set.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// COCO results file (JSON array or one object per line).
        #[arg(long, conflicts_with_all = ["checkpoint", "config"], requires = "gt")]
        detections: Option<PathBuf>,
        #[arg(long, requires = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Source category ids to score, e.g. "1,3"; default all.
        #[arg(long, value_parser = parse_ids)]
        categories: Option<std::vec::Vec<u64>>,
        #[arg(long)]
        max_dets: Option<usize>,
        /// Also write the scored detections in COCO results format.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
    },
    /// Select exemplars for one phase of a split.
    Exemplars {
        #[arg(long)]
        data: PathBuf,
        /// Split manifest; without it the whole file is one phase.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        phase: usize,
        #[arg(long, default_value_t = 0.1)]
        budget_fraction: f64,
        #[arg(long, value_enum, default_value = "greedy")]
        method: exemplars::Method,
        #[arg(long, value_enum, default_value = "annotations")]
        unit: Unit,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "exemplars.json")]
        out: PathBuf,
    },
    /// Run every mode over several seeds and summarize.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// "all" or a comma-separated list of modes.
        #[arg(long, default_value = "all")]
        modes: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Parallel jobs; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Discard the job ledger in --out and start over.
        #[arg(long)]
        restart: bool,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Chart a metrics CSV as SVG, one line per method.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "report.svg")]
        out: PathBuf,
        #[arg(long, default_value = "ap")]
        metric: String,
    },
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Split {
            data,
            setup,
            mode,
            seed,
            sample_fractions,
            out,
        } => split::run(&split::SplitArgs {
            data,
            setup,
            mode: match mode {
                Protocol::Strict => ProtocolMode::Strict,
                Protocol::Traditional => ProtocolMode::Traditional,
            },
            seed,
            sample_fractions,
            out,
        }),
        Command::Train { config, out, dry_run } => train::run(&train::TrainArgs { config, out, dry_run }),
        Command::Eval {
            gt,
            detections,
            checkpoint,
            config,
            categories,
            max_dets,
            dump,
            out,
        } => eval::run(&eval::EvalArgs {
            gt,
            detections,
            checkpoint,
            config,
            categories: categories.unwrap_or_default(),
            max_dets,
            dump,
            out,
        }),
        Command::Exemplars {
            data,
            manifest,
            phase,
            budget_fraction,
            method,
            unit,
            seed,
            out,
        } => exemplars::run(&exemplars::ExemplarArgs {
            data,
            manifest,
            phase,
            budget_fraction,
            method,
            unit: match unit {
                Unit::Annotations => MarginalUnit::Annotations,
                Unit::Images => MarginalUnit::Images,
            },
            seed,
            out,
        }),
        Command::Ablate {
            config,
            modes,
            seeds,
            jobs,
            restart,
            out,
        } => ablate::run(&ablate::AblateArgs {
            config,
            modes,
            seeds,
            jobs,
            restart,
            out,
        }),
        Command::Plot { input, out, metric } => plot::run(&plot::PlotArgs { input, out, metric }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
