//! `uqcurate`: pool features, fit and score, report, filter, and the
//! synthetic and loss-evaluation tools.
//!
//! Exit codes: 0 success, 1 usage, 2 data or integrity error, 3 numerical
//! failure of the model.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::FileConfig;

#[derive(Parser, Debug)]
#[command(
    name = "uqcurate",
    version,
    about = "Uncertainty scoring and curation for detection datasets"
)]
struct Cli {
    /// TOML file mirroring the flags; flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pool one feature vector per annotated object into an archive.
    Pool(PoolArgs),
    /// Fit the class-conditional model and score every archived object.
    Score(ScoreArgs),
    /// Filter annotations by score and write the filtered dataset.
    Filter(FilterArgs),
    /// Write score histograms and dataset statistics.
    Report(ReportArgs),
    /// Run the synthetic outlier-recovery experiment.
    Synth(SynthArgs),
    /// Evaluate losses and gradients on a CSV of (prob, target, score).
    LossEval(LossEvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolFlag {
    Box,
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutFlag {
    Stretch,
    LongestSide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyFlag {
    NoiseGlobal,
    NoiseClass,
    Redundancy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeFlag {
    Global,
    PerClass,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SignFlag {
    Literal,
    MaxEntropy,
}

#[derive(Args, Debug)]
pub struct PoolArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pool: Option<PoolFlag>,
    #[arg(long, value_enum)]
    grid_layout: Option<LayoutFlag>,
    /// Continue past images without a feature map.
    #[arg(long)]
    skip_missing: bool,
    /// Pool crowd regions too.
    #[arg(long)]
    include_crowd: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Score against an existing model instead of fitting one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Covariance ridge; default max(1e-6 * trace / dim, 1e-12).
    #[arg(long)]
    eps: Option<f64>,
    /// Histogram bin count.
    #[arg(long)]
    hist_bins: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyFlag>,
    /// Quantile level for noise filters, drop fraction for redundancy.
    #[arg(long)]
    p: Option<f64>,
    /// Score bins per class for the redundancy filter.
    #[arg(long)]
    bins: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Remove images left without annotations.
    #[arg(long)]
    drop_empty_images: bool,
    /// Remove annotations that were never scored (crowd, zero-area).
    #[arg(long)]
    drop_unscored: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Also summarize this annotation file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    hist_bins: Option<usize>,
    #[arg(long, value_enum)]
    scope: Option<ScopeFlag>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Distance between class means, in within-class standard deviations.
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    contamination: Option<f64>,
    /// Outlier displacement, in standard deviations.
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the generated archive, annotations and ground truth.
    #[arg(long)]
    write_data: bool,
}

#[derive(Args, Debug)]
pub struct LossEvalArgs {
    /// CSV rows of prob,target,score (an optional header row is skipped).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    sign: Option<SignFlag>,
    /// Write per-item gradients as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let file = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Pool(a) => commands::pool(a, &file),
        Command::Score(a) => commands::score(a, &file),
        Command::Filter(a) => commands::filter(a, &file),
        Command::Report(a) => commands::report(a, &file),
        Command::Synth(a) => commands::synth(a, &file),
        Command::LossEval(a) => commands::loss_eval(a, &file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
