//! `mvdlm`: voxel-wise activation mapping with matrix-variate dynamic linear models.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvdlm::{ErrorCategory, Paradigm};

use config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(
    name = "mvdlm",
    version,
    about = "Bayesian dynamic activation maps for fMRI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convolve stimulus timings with the response function into a design CSV.
    Design(DesignArgs),
    /// Fit one subject and write evidence maps and a posterior summary.
    Fit(FitArgs),
    /// Combine subject summaries into group or group-difference maps.
    Group(GroupArgs),
    /// Generate a synthetic phantom with known active regions.
    Simulate(SimulateArgs),
    /// Count false activations on null data under fictitious paradigms.
    Assess(AssessArgs),
}

#[derive(Debug, Args)]
struct DesignArgs {
    /// Timing file (onset, duration[, amplitude]); `name=path` sets the task name.
    #[arg(
        long = "stimulus",
        value_name = "FILE",
        required_unless_present = "paradigm"
    )]
    stimuli: Vec<String>,
    /// Use a built-in fictitious paradigm instead of timing files.
    #[arg(long, conflicts_with = "stimuli")]
    paradigm: Option<Paradigm>,
    /// Seed for the randomized paradigm.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repetition time in seconds.
    #[arg(long)]
    tr: f64,
    #[arg(long)]
    scans: usize,
    #[command(flatten)]
    hrf: HrfArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HrfArgs {
    #[arg(long)]
    peak_delay: Option<f64>,
    #[arg(long)]
    undershoot_delay: Option<f64>,
    #[arg(long)]
    peak_dispersion: Option<f64>,
    #[arg(long)]
    undershoot_dispersion: Option<f64>,
    #[arg(long)]
    undershoot_ratio: Option<f64>,
    /// Kernel length in seconds.
    #[arg(long)]
    hrf_length: Option<f64>,
    /// Sub-scan resolution of the convolution.
    #[arg(long)]
    upsample: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// 4-D NIfTI series.
    #[arg(long)]
    bold: PathBuf,
    /// Design CSV from `mvdlm design`.
    #[arg(long)]
    design: PathBuf,
    /// Mask image; nonzero voxels are analysed.
    #[arg(long, conflicts_with = "mask_fraction")]
    mask: Option<PathBuf>,
    /// Keep voxels whose mean exceeds this fraction of the 98th percentile.
    #[arg(long)]
    mask_fraction: Option<f64>,
    /// Repetition time; defaults to the image header.
    #[arg(long)]
    tr: Option<f64>,
    /// Skip writing the posterior summary.
    #[arg(long)]
    no_summary: bool,
    #[command(flatten)]
    run: ConfigArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GroupArgs {
    /// Summary directory written by `mvdlm fit` (repeatable).
    #[arg(long = "subject", value_name = "DIR", required = true)]
    subjects: Vec<PathBuf>,
    /// Summaries of a second group; maps become first minus second.
    #[arg(long = "versus", value_name = "DIR")]
    versus: Vec<PathBuf>,
    #[command(flatten)]
    run: ConfigArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Phantom description (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Design CSV driving the regions; overrides the phantom file.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long)]
    tr: Option<f64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AssessArgs {
    /// Null 4-D series to analyse.
    #[arg(
        long,
        required_unless_present = "generate",
        conflicts_with = "generate"
    )]
    null: Option<PathBuf>,
    /// Generate resting data from this JSON description instead.
    #[arg(long)]
    generate: Option<PathBuf>,
    /// Fictitious paradigm(s); all four when omitted.
    #[arg(long, value_delimiter = ',')]
    paradigm: Vec<Paradigm>,
    #[arg(long, conflicts_with = "mask_fraction")]
    mask: Option<PathBuf>,
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long)]
    tr: Option<f64>,
    #[command(flatten)]
    run: ConfigArgs,
    #[arg(long, short)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mvdlm::Error>() {
            return match e.category() {
                ErrorCategory::InvalidInput => 2,
                ErrorCategory::Io => 3,
                ErrorCategory::Format => 4,
                ErrorCategory::Metadata => 5,
                ErrorCategory::Numerical => 6,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<serde_json::Error>() {
            return if e.is_data() { 2 } else { 4 };
        }
    }
    1
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Design(a) => commands::design(a),
        Command::Fit(a) => commands::fit(a),
        Command::Group(a) => commands::group(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Assess(a) => commands::assess(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
