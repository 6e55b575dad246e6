use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use toponav::policy::Policy;
use toponav::trainer::{run_stage, EvalPoint, LogRecord, Stage, StageSink, TrainConfig};
use toponav::world::{split_dataset, Episode};

use crate::data::DataDir;
use crate::error::{io_at, refuse, usage, CliError, Result};
use crate::manifest::{derive_run_id, prepare_dir, sha256_bytes, sha256_file, LineageEntry, RunManifest};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOG_DIR: &str = "logs";
pub const REPORT_DIR: &str = "reports";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const TRAIN_LOG: &str = "logs/train.jsonl";
pub const EVAL_LOG: &str = "logs/evals.jsonl";
pub const SELECTION_REPORT: &str = "reports/selection.json";

/// Fraction of the task dataset held back for reinforcement fine-tuning.
pub const RFT_FRACTION: f64 = 0.1;

/// Runs one training stage into a run directory.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    pub stage: Stage,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint of an earlier run: a pretrain run for sft, an sft run for rft.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: toponav::NavError| e.to_string())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Selection {
    pub stage: String,
    pub selected: usize,
    pub selected_step: usize,
    pub score: f64,
    pub evals: Vec<EvalPoint>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub run_id: String,
    pub selection: Selection,
}

struct FileSink {
    root: PathBuf,
    log: BufWriter<File>,
    evals: BufWriter<File>,
}

impl FileSink {
    fn new(root: &Path) -> Result<Self> {
        let open = |rel: &str| -> Result<BufWriter<File>> {
            let p = root.join(rel);
            Ok(BufWriter::new(File::create(&p).map_err(io_at(&p))?))
        };
        Ok(FileSink {
            root: root.to_path_buf(),
            log: open(TRAIN_LOG)?,
            evals: open(EVAL_LOG)?,
        })
    }

    fn finish(mut self) -> Result<()> {
        self.log.flush()?;
        self.evals.flush()?;
        Ok(())
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("{CHECKPOINT_DIR}/step-{step:06}.ckpt")
}

impl StageSink for FileSink {
    fn log(&mut self, record: &LogRecord) -> toponav::Result<()> {
        serde_json::to_writer(&mut self.log, record)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&mut self, point: &EvalPoint, policy: &Policy) -> toponav::Result<()> {
        policy.save(&self.root.join(checkpoint_name(point.step)))?;
        serde_json::to_writer(&mut self.evals, point)?;
        self.evals.write_all(b"\n")?;
        Ok(())
    }
}

/// Locates the run holding `ckpt` and checks the checkpoint against its manifest.
fn resolve_init(ckpt: &Path) -> Result<(RunManifest, LineageEntry, Policy)> {
    if !ckpt.is_file() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let run_dir = ckpt
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| CliError::Contract(format!("{} is not inside a run directory", ckpt.display())))?;
    let manifest = RunManifest::load(run_dir).map_err(|e| {
        CliError::Contract(format!("{} has no readable run manifest ({e}); lineage cannot be established", run_dir.display()))
    })?;
    let file_name = ckpt.file_name().expect("is_file checked").to_string_lossy();
    let rel = format!("{CHECKPOINT_DIR}/{file_name}");
    let recorded = manifest
        .file(&rel)
        .ok_or_else(|| CliError::Contract(format!("{rel} is not listed in the manifest of {}", run_dir.display())))?;
    let hash = sha256_file(ckpt)?;
    if hash != recorded.sha256 {
        return refuse(format!("{} was modified after its run finished", ckpt.display()));
    }
    let stage = manifest
        .stage
        .clone()
        .ok_or_else(|| CliError::Contract(format!("{} is not a training run", run_dir.display())))?;
    let policy = Policy::load(ckpt)?;
    let entry = LineageEntry {
        stage,
        run_id: manifest.run_id.clone(),
        checkpoint: rel,
        sha256: hash,
    };
    Ok((manifest, entry, policy))
}

/// Which stage may seed which.
fn check_lineage(stage: Stage, parent: Option<&str>) -> Result<()> {
    match (stage, parent) {
        (Stage::Pretrain, Some(p)) => refuse(format!("pretraining starts from scratch, but --init names a {p} checkpoint")),
        (Stage::Sft, Some(p)) if p != "pretrain" => {
            refuse(format!("sft must start from a pretrain checkpoint, not from a {p} checkpoint"))
        }
        (Stage::Rft, None) => refuse("rft needs --init with a checkpoint from an sft run"),
        (Stage::Rft, Some(p)) if p != "sft" => refuse(format!("rft must start from an sft checkpoint, not from a {p} checkpoint")),
        _ => Ok(()),
    }
}

/// Training episodes for `cfg.stage`.
pub fn stage_episodes(cfg: &TrainConfig, data: &DataDir) -> Result<Vec<Episode>> {
    match cfg.stage {
        Stage::Pretrain => {
            let mut out = Vec::new();
            for src in cfg.pretrain_sources()? {
                out.extend(data.episodes(src)?);
            }
            if out.is_empty() {
                return refuse(format!("pretrain_data {:?} selects no episodes in {}", cfg.pretrain_data, data.root.display()));
            }
            Ok(out)
        }
        Stage::Sft | Stage::Rft => {
            let train = data.require("train")?;
            let (sft, rft) = split_dataset(&train, RFT_FRACTION, data.seed())?;
            Ok(if cfg.stage == Stage::Sft { sft } else { rft })
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    if !args.config.is_file() {
        return Err(CliError::Io(format!("config {} does not exist", args.config.display())));
    }
    let cfg = TrainConfig::load(&args.config)?;
    if cfg.stage != args.stage {
        return usage(format!("--stage {} but {} configures stage {}", args.stage, args.config.display(), cfg.stage));
    }
    let init = args.init.as_deref().map(resolve_init).transpose()?;
    check_lineage(cfg.stage, init.as_ref().map(|(_, e, _)| e.stage.as_str()))?;
    let data = DataDir::open(&args.data)?;
    if let (Stage::Rft, Some((parent, _, _))) = (cfg.stage, &init) {
        // The 90/10 split is only disjoint if both stages split the same dataset.
        if parent.inputs.get("data").map(|e| &e.sha256) != Some(&data.entry.sha256) {
            return refuse("rft must use the same dataset as the sft run it starts from");
        }
    }
    let train = stage_episodes(&cfg, &data)?;
    let val = data.require("val")?;

    let snapshot = cfg.to_toml_string();
    let init_hash = init.as_ref().map(|(_, e, _)| e.sha256.clone()).unwrap_or_default();
    let run_id = derive_run_id(&["train", &snapshot, &data.entry.sha256, &init_hash]);

    let out = prepare_dir(&args.out, &[CHECKPOINT_DIR, LOG_DIR, REPORT_DIR])?;
    let snap_path = out.join(CONFIG_SNAPSHOT);
    fs::write(&snap_path, &snapshot).map_err(io_at(&snap_path))?;

    let mut sink = FileSink::new(&out)?;
    let init_policy = init.as_ref().map(|(_, _, p)| p.clone());
    let outcome = run_stage(&cfg, init_policy, &data.worlds, &train, &val, &mut sink)?;
    sink.finish()?;

    let best_path = out.join(BEST_CHECKPOINT);
    outcome.best.save(&best_path)?;
    let chosen = &outcome.evals[outcome.selected];
    let selection = Selection {
        stage: cfg.stage.to_string(),
        selected: outcome.selected,
        selected_step: chosen.step,
        score: chosen.score,
        evals: outcome.evals.clone(),
    };
    let sel_path = out.join(SELECTION_REPORT);
    fs::write(&sel_path, serde_json::to_string_pretty(&selection)? + "\n").map_err(io_at(&sel_path))?;

    let mut m = RunManifest::new("train", run_id.clone());
    m.stage = Some(cfg.stage.to_string());
    m.config_snapshot = Some(CONFIG_SNAPSHOT.into());
    m.seeds.insert("train".into(), cfg.seed);
    m.seeds.insert("data".into(), data.seed());
    m.inputs.insert("data".into(), data.entry.clone());
    if let Some((parent, entry, _)) = init {
        m.lineage = parent.lineage.clone();
        m.lineage.push(entry);
    }
    m.seal(&out)?;
    debug_assert_eq!(sha256_bytes(snapshot.as_bytes()), sha256_file(&snap_path)?);
    Ok(TrainSummary { out, run_id, selection })
}
