use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bpt_cli::commands::{self, CommonArgs};

/// Binary point-cloud transformer toolkit.
#[derive(Parser)]
#[command(name = "bpt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SharedFlags {
    /// Declarative run configuration (TOML); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data generation, initialization, and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: out/).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset manifest path (switches the dataset source to "manifest").
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path (required by eval-* and export-binary).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model twin: binary | fp.
    #[arg(long)]
    twin: Option<String>,
}

impl From<SharedFlags> for CommonArgs {
    fn from(f: SharedFlags) -> Self {
        CommonArgs {
            config: f.config,
            seed: f.seed,
            out: f.out,
            data: f.data,
            checkpoint: f.checkpoint,
            twin: f.twin,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the point-cloud classifier.
    TrainCls(SharedFlags),
    /// Train the place-recognition descriptor model.
    TrainPr(SharedFlags),
    /// Evaluate a classifier checkpoint (overall / mean accuracy).
    EvalCls(SharedFlags),
    /// Evaluate a descriptor checkpoint (average recall @1 and @1%).
    EvalPr(SharedFlags),
    /// Emit the per-layer parameter/size/FLOPs report for a configuration.
    CostReport(SharedFlags),
    /// Convert a training checkpoint to a packed deploy checkpoint
    /// (verifies two-path equivalence first).
    ExportBinary(SharedFlags),
    /// Run the oracle self-test suites.
    Selftest(SharedFlags),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainCls(f) => commands::train_cls(&f.into()),
        Command::TrainPr(f) => commands::train_pr(&f.into()),
        Command::EvalCls(f) => commands::eval_cls(&f.into()),
        Command::EvalPr(f) => commands::eval_pr(&f.into()),
        Command::CostReport(f) => commands::cost_report_cmd(&f.into()),
        Command::ExportBinary(f) => commands::export_binary(&f.into()),
        Command::Selftest(f) => commands::selftest(&f.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code as u8)
        }
    }
}
