use std::fs;
use std::path::PathBuf;

use clap::Args;
use toponav::metrics::{MetricReport, RewardKind, Scores};
use toponav::policy::Policy;
use toponav::trainer::{evaluate, evaluate_expert};
use toponav::world::{Episode, WorldSet};

use crate::data::DataDir;
use crate::error::{io_at, usage, CliError, Result};
use crate::manifest::{derive_run_id, prepare_dir, sha256_file, RunManifest};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const WORKERS_ENV: &str = "TOPONAV_WORKERS";

/// Evaluates a checkpoint, or the planner expert, on one split of a dataset.
#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "expert", conflicts_with = "expert")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the global-planner expert instead of a checkpoint.
    #[arg(long)]
    pub expert: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Reward reported in the `reward` column: r2r or rxr.
    #[arg(long, default_value = "r2r", value_parser = parse_reward)]
    pub reward: RewardKind,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_reward(s: &str) -> std::result::Result<RewardKind, String> {
    match s {
        "r2r" => Ok(RewardKind::R2r),
        "rxr" => Ok(RewardKind::Rxr),
        other => Err(format!("unknown reward {other:?}; expected r2r or rxr")),
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub subject: String,
    pub split: String,
    pub episodes: usize,
    pub mean: Scores,
}

/// Worker threads from the environment; at least one.
pub fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Evaluates in contiguous chunks on worker threads; rows keep episode order.
pub fn evaluate_parallel(
    policy: Option<&Policy>,
    worlds: &WorldSet,
    episodes: &[Episode],
    kind: RewardKind,
    workers: usize,
) -> toponav::Result<MetricReport> {
    let run = |chunk: &[Episode]| match policy {
        Some(p) => evaluate(p, worlds, chunk, kind),
        None => evaluate_expert(worlds, chunk, kind),
    };
    if workers <= 1 || episodes.len() < 2 {
        return run(episodes);
    }
    let size = episodes.len().div_ceil(workers);
    let parts: Vec<toponav::Result<MetricReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = episodes.chunks(size).map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut report = MetricReport::default();
    for p in parts {
        report.rows.extend(p?.rows);
    }
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    let policy = match (&args.checkpoint, args.expert) {
        (Some(path), false) => {
            if !path.is_file() {
                return Err(CliError::Io(format!("checkpoint {} does not exist", path.display())));
            }
            Some(Policy::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?)
        }
        (None, true) => None,
        _ => return usage("pass exactly one of --checkpoint and --expert"),
    };
    let data = DataDir::open(&args.data)?;
    let episodes = data.require(&args.split)?;
    let report = evaluate_parallel(policy.as_ref(), &data.worlds, &episodes, args.reward, workers())?;

    let subject = match &args.checkpoint {
        Some(p) => format!("checkpoint:{}", sha256_file(p)?),
        None => "expert".to_string(),
    };
    let summary = EvalSummary {
        subject: subject.clone(),
        split: args.split.clone(),
        episodes: report.len(),
        mean: report.mean(),
    };
    let out = prepare_dir(&args.out, &[])?;
    let csv = out.join(METRICS_FILE);
    fs::write(&csv, report.to_csv()).map_err(io_at(&csv))?;
    let sp = out.join(SUMMARY_FILE);
    fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_at(&sp))?;

    let mut m = RunManifest::new("eval", derive_run_id(&["eval", &subject, &args.split, &data.entry.sha256]));
    m.seeds.insert("data".into(), data.seed());
    m.inputs.insert("data".into(), data.entry.clone());
    m.seal(&out)?;
    Ok(summary)
}
