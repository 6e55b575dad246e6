//! Command-line harness for toponav: dataset generation, stage-by-stage
//! training with lineage checks, evaluation, ablation suites and reports.
//!
//! Every command writes into a directory sealed by a `manifest.json` listing
//! each produced file with its SHA-256. Exit codes: 0 success, 1 usage,
//! 2 I/O, 3 contract violation.

pub mod ablate;
pub mod data;
pub mod error;
pub mod eval;
pub mod gen_world;
pub mod manifest;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

/// Relative `--out` paths resolve against this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "TOPONAV_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "toponav", version, about = "Graph-level instruction-following navigation: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    GenWorld(gen_world::GenWorldArgs),
    Train(train::TrainArgs),
    Eval(eval::EvalArgs),
    Ablate(ablate::AblateArgs),
    Report(report::ReportArgs),
}

pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Runs one command and returns the line to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenWorld(mut a) => {
            a.out = output_path(&a.out);
            let s = gen_world::cmd_gen_world(&a)?;
            Ok(gen_world::describe(&s, &a.out))
        }
        Command::Train(mut a) => {
            a.out = output_path(&a.out);
            let s = train::cmd_train(&a)?;
            Ok(format!(
                "run {} ({}) selected step {} with score {:.4}; wrote {}",
                s.run_id,
                s.selection.stage,
                s.selection.selected_step,
                s.selection.score,
                s.out.display()
            ))
        }
        Command::Eval(mut a) => {
            a.out = output_path(&a.out);
            let s = eval::cmd_eval(&a)?;
            Ok(format!(
                "{} on {} episodes of {}: SR {:.2} SPL {:.2} nDTW {:.2} SDTW {:.2} NE {:.2}",
                s.subject,
                s.episodes,
                s.split,
                100.0 * s.mean.sr,
                100.0 * s.mean.spl,
                100.0 * s.mean.ndtw,
                100.0 * s.mean.sdtw,
                s.mean.ne
            ))
        }
        Command::Ablate(mut a) => {
            a.out = output_path(&a.out);
            let rows = ablate::cmd_ablate(&a)?;
            Ok(ablate::comparison_csv(&rows).trim_end().to_string())
        }
        Command::Report(mut a) => {
            a.out = output_path(&a.out);
            report::cmd_report(&a)?;
            Ok(format!("wrote {}", a.out.display()))
        }
    }
}
