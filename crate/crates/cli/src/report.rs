use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;

use crate::error::{io_at, usage, CliError, Result};
use crate::manifest::{derive_run_id, prepare_dir, RunManifest};
use crate::train::{Selection, SELECTION_REPORT};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";

/// Collects finished training runs into summary and learning-curve tables.
#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    label: String,
    manifest: RunManifest,
    selection: Selection,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes `summary.csv` (one row per run) and `curves.csv` (one row per
/// evaluation of each run). Runs are ordered by path so the output does not
/// depend on argument order.
pub fn cmd_report(args: &ReportArgs) -> Result<(String, String)> {
    let mut runs = args.runs.clone();
    runs.sort();
    runs.dedup();
    let missing: Vec<String> = runs
        .iter()
        .filter(|r| !r.join(crate::manifest::MANIFEST_FILE).is_file())
        .map(|r| r.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Io(format!("runs not found: {}", missing.join(", "))));
    }
    let mut loaded = Vec::new();
    for r in &runs {
        let manifest = RunManifest::load(r)?;
        if manifest.kind != "train" {
            return usage(format!("{} is a {} directory, not a training run", r.display(), manifest.kind));
        }
        manifest.verify(r)?;
        let sp = r.join(SELECTION_REPORT);
        let selection: Selection = serde_json::from_str(&fs::read_to_string(&sp).map_err(io_at(&sp))?)?;
        loaded.push(Loaded {
            label: r.display().to_string(),
            manifest,
            selection,
        });
    }

    let mut summary = String::from("run,run_id,stage,evals,selected_step,score,sr,spl,ndtw,sdtw,sap_acc,mlm_acc\n");
    let mut curves = String::from("run,stage,step,score,sr,spl,ndtw,sdtw,ne,sap_acc,mlm_acc\n");
    for l in &loaded {
        let s = &l.selection;
        let best = &s.evals[s.selected];
        let m = best.metrics;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{:.6},{},{},{},{},{},{}",
            l.label,
            l.manifest.run_id,
            s.stage,
            s.evals.len(),
            s.selected_step,
            s.score,
            opt(m.map(|m| m.sr)),
            opt(m.map(|m| m.spl)),
            opt(m.map(|m| m.ndtw)),
            opt(m.map(|m| m.sdtw)),
            opt(best.sap_accuracy),
            opt(best.mlm_accuracy),
        );
        for e in &s.evals {
            let m = e.metrics;
            let _ = writeln!(
                curves,
                "{},{},{},{:.6},{},{},{},{},{},{},{}",
                l.label,
                s.stage,
                e.step,
                e.score,
                opt(m.map(|m| m.sr)),
                opt(m.map(|m| m.spl)),
                opt(m.map(|m| m.ndtw)),
                opt(m.map(|m| m.sdtw)),
                opt(m.map(|m| m.ne)),
                opt(e.sap_accuracy),
                opt(e.mlm_accuracy),
            );
        }
    }

    let out = prepare_dir(&args.out, &[])?;
    for (name, text) in [(SUMMARY_CSV, &summary), (CURVES_CSV, &curves)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_at(&p))?;
    }
    let ids: Vec<&str> = loaded.iter().map(|l| l.manifest.run_id.as_str()).collect();
    let m = RunManifest::new("report", derive_run_id(&ids));
    m.seal(&out)?;
    Ok((summary, curves))
}
