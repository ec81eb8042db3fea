//! overlay-phase: phase-space analytics, trace classification, churn
//! fitting, loss-queue models, trace generation, and overlay simulation
//! behind one command-line entry point.
//!
//! Exit codes: 0 success, 2 input error, 3 model error, 4 internal
//! invariant violation.

mod commands;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use overlay_core::simulator::SimError;
use overlay_core::types::SoftwareProfile;

#[derive(Debug)]
pub enum AppError {
    Input(String),
    Model(String),
    Internal(String),
}

impl AppError {
    pub fn input(msg: impl Into<String>) -> Self {
        AppError::Input(msg.into())
    }

    pub fn model(msg: impl Into<String>) -> Self {
        AppError::Model(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            AppError::Input(_) => 2,
            AppError::Model(_) => 3,
            AppError::Internal(_) => 4,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Input(msg) => write!(f, "input error: {msg}"),
            AppError::Model(msg) => write!(f, "model error: {msg}"),
            AppError::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl From<overlay_core::ingest::IngestError> for AppError {
    fn from(e: overlay_core::ingest::IngestError) -> Self {
        AppError::Input(e.to_string())
    }
}

impl From<overlay_core::analytics::AnalyticsError> for AppError {
    fn from(e: overlay_core::analytics::AnalyticsError) -> Self {
        AppError::Model(e.to_string())
    }
}

impl From<overlay_core::queue::QueueError> for AppError {
    fn from(e: overlay_core::queue::QueueError) -> Self {
        AppError::Model(e.to_string())
    }
}

impl From<overlay_core::churn::ChurnError> for AppError {
    fn from(e: overlay_core::churn::ChurnError) -> Self {
        AppError::Model(e.to_string())
    }
}

impl From<overlay_core::classifier::ClassifierError> for AppError {
    fn from(e: overlay_core::classifier::ClassifierError) -> Self {
        AppError::Model(e.to_string())
    }
}

impl From<overlay_core::tracegen::TracegenError> for AppError {
    fn from(e: overlay_core::tracegen::TracegenError) -> Self {
        AppError::Model(e.to_string())
    }
}

impl From<overlay_core::types::TypeError> for AppError {
    fn from(e: overlay_core::types::TypeError) -> Self {
        AppError::Input(e.to_string())
    }
}

impl From<SimError> for AppError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invariant { .. } => AppError::Internal(e.to_string()),
            other => AppError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "overlay-phase",
    version,
    about = "Degree-dynamics toolkit for two-tier p2p overlays"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Seed for anything stochastic in the subcommand (default 1;
    /// a seed in a simulate config file wins unless this is passed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Software profile: a built-in name (limewire, bearshare), a file
    /// under $OVERLAY_PHASE_PROFILE_DIR, or a path to a profile JSON.
    #[arg(long, global = true, default_value = "limewire")]
    pub profile: String,
    /// Directory for emitted CSV artifacts and the run report.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

impl CommonArgs {
    /// Resolve the profile: built-ins first, then
    /// `$OVERLAY_PHASE_PROFILE_DIR/<name>.json`, then a literal path.
    pub fn load_profile(&self) -> Result<SoftwareProfile, AppError> {
        if let Some(profile) = SoftwareProfile::builtin(&self.profile) {
            return Ok(profile);
        }
        let mut candidates = Vec::new();
        if let Ok(dir) = std::env::var("OVERLAY_PHASE_PROFILE_DIR") {
            candidates.push(PathBuf::from(dir).join(format!("{}.json", self.profile)));
        }
        candidates.push(PathBuf::from(&self.profile));
        for path in &candidates {
            if path.is_file() {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    AppError::input(format!("cannot read profile {}: {e}", path.display()))
                })?;
                return serde_json::from_str(&text).map_err(|e| {
                    AppError::input(format!("profile {} invalid: {e}", path.display()))
                });
            }
        }
        Err(AppError::input(format!(
            "unknown profile {:?} (no built-in, nothing at {:?})",
            self.profile, candidates
        )))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Phase-space statics and transition dynamics of a crawl trace.
    Analyze(commands::AnalyzeArgs),
    /// Assign each peer trace to a stability class.
    Classify(commands::ClassifyArgs),
    /// Churn statistics: departure fits, sessions, lifetimes, rates.
    Fit(commands::FitArgs),
    /// Loss-queue model equilibria and blocking probabilities.
    Model(commands::ModelArgs),
    /// Synthesize degree traces from a fitted model.
    Generate(commands::GenerateArgs),
    /// Run the slot-protocol overlay simulation.
    Simulate(commands::SimulateArgs),
    /// Summarize one or more run reports as text.
    Report(commands::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => commands::analyze(&cli.common, &args),
        Command::Classify(args) => commands::classify(&cli.common, &args),
        Command::Fit(args) => commands::fit(&cli.common, &args),
        Command::Model(args) => commands::model(&cli.common, &args),
        Command::Generate(args) => commands::generate(&cli.common, &args),
        Command::Simulate(args) => commands::simulate(&cli.common, &args),
        Command::Report(args) => commands::report_summary(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("overlay-phase: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
