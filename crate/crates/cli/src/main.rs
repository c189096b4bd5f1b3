mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fovcast_core::Error;

use config::Overrides;

/// Viewport prediction experiments for 360-degree video.
#[derive(Debug, Parser)]
#[command(name = "fovcast", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert raw head-movement logs to the canonical session file.
    Ingest {
        /// A file, or a directory of .csv files.
        #[arg(long)]
        input: PathBuf,
        /// toy-csv, canonical, tsinghua or shanghai.
        #[arg(long, default_value = "canonical")]
        adapter: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cohort whose viewers follow a shared moving target.
    Synth {
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long, default_value_t = 8)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        seconds: usize,
        /// Viewers hold still instead.
        #[arg(long = "static")]
        still: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-second heat grids for every session.
    GenHeatmaps {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a trajectory or heatmap model on the training videos.
    Train {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict every window of the sessions with saved weights.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-horizon report for a baseline or saved weights on the test videos.
    Eval {
        #[arg(long)]
        sessions: PathBuf,
        /// Baseline name: persistency, linear-regression, truncated-linear, naive-average, knn.
        #[arg(long, conflicts_with = "weights", required_unless_present = "weights")]
        baseline: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Model name written in the report.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank evaluation reports.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 1 usage, 2 data, 3 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                e if e.is_numeric() => 3,
                Error::Config(_) | Error::Untrained | Error::MissingFusion(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command, &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e).context("while running"));
        assert_eq!(code(Error::Config("x".into())), 1);
        assert_eq!(code(Error::Format("x".into())), 2);
        assert_eq!(code(Error::NonFinite { op: "matmul" }), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }
}
