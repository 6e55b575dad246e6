use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use toponav::metrics::Scores;
use toponav::trainer::{Stage, TemperatureSchedule, TrainConfig};

use crate::data::DataDir;
use crate::error::{io_at, refuse, usage, Result};
use crate::eval::{cmd_eval, EvalArgs};
use crate::manifest::{derive_run_id, prepare_dir, RunManifest};
use crate::train::{cmd_train, TrainArgs, BEST_CHECKPOINT};

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const RUNS_FILE: &str = "runs.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Full GRPO plus the four single-toggle variants.
    Grpo,
    /// Pretraining corpus compositions.
    Data,
}

/// Trains one run per variant of a base config and compares them.
#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Base config; an rft config for the grpo suite, a pretrain config for the data suite.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Starting checkpoint (an sft checkpoint for the grpo suite).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Comma-separated training seeds; defaults to the base config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Split used for the comparison.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    /// The single field changed from the base config, with its new value; `None` for the base itself.
    pub change: Option<(String, String)>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub field: String,
    pub value: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Scores>,
    pub mean: Scores,
}

impl VariantResult {
    pub fn score(&self) -> f64 {
        self.mean.sr + self.mean.spl
    }
}

/// Fields whose values differ between two configs, by their serialized form.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<(String, String)> {
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return Vec::new();
    };
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(*v))
        .map(|(k, _)| (k.clone(), mb[k].to_string().trim_matches('"').to_string()))
        .collect()
}

pub fn suite_variants(suite: Suite, base: &TrainConfig) -> Result<Vec<Variant>> {
    let tweak = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    let raw: Vec<(String, TrainConfig)> = match suite {
        Suite::Grpo => {
            if base.stage != Stage::Rft {
                return usage(format!("the grpo suite needs an rft base config, got {}", base.stage));
            }
            vec![
                ("full".to_string(), base.clone()),
                tweak("no-sample-dropout", &|c| c.sample_dropout = false),
                tweak("no-frozen-dropout", &|c| c.frozen_dropout = false),
                tweak("temperature", &|c| c.temperature = TemperatureSchedule::Decay),
                tweak("multi-epoch", &|c| c.update_epochs = 2),
            ]
        }
        Suite::Data => {
            if base.stage != Stage::Pretrain {
                return usage(format!("the data suite needs a pretrain base config, got {}", base.stage));
            }
            ["train", "train+extra", "train+aug", "train+extra+aug"]
                .iter()
                .map(|mix| tweak(mix, &|c| c.pretrain_data = mix.to_string()))
                .collect()
        }
    };
    let mut out = Vec::new();
    for (i, (name, config)) in raw.into_iter().enumerate() {
        let diff = config_diff(base, &config);
        let change = match (i, diff.len()) {
            (0, 0) if suite == Suite::Grpo => None,
            (_, 1) => Some(diff[0].clone()),
            (_, 0) if suite == Suite::Data => None,
            (_, n) => {
                return refuse(format!(
                    "variant {name} must differ from the base config in exactly one field, found {n}; \
                     the grpo suite expects a base with both dropout flags on, temperature off and update_epochs 1"
                ))
            }
        };
        out.push(Variant { name, change, config });
    }
    Ok(out)
}

fn write_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, cfg.to_toml_string()).map_err(io_at(path))
}

pub fn comparison_csv(results: &[VariantResult]) -> String {
    let mut out = String::from("variant,field,value,seeds,sr,spl,ndtw,sdtw,ne,score\n");
    for r in results {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.variant,
            r.field,
            r.value,
            seeds.join(" "),
            r.mean.sr,
            r.mean.spl,
            r.mean.ndtw,
            r.mean.sdtw,
            r.mean.ne,
            r.score()
        );
    }
    out
}

fn mean_scores(all: &[Scores]) -> Scores {
    let k = all.len().max(1) as f64;
    let sum = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / k;
    Scores {
        ne: sum(|s| s.ne),
        sr: sum(|s| s.sr),
        osr: sum(|s| s.osr),
        spl: sum(|s| s.spl),
        gspl: sum(|s| s.gspl),
        ndtw: sum(|s| s.ndtw),
        sdtw: sum(|s| s.sdtw),
        reward: sum(|s| s.reward),
    }
}

/// Results sorted by SR + SPL, best first; ties by name.
pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<VariantResult>> {
    if !args.base.is_file() {
        return Err(crate::error::CliError::Io(format!("base config {} does not exist", args.base.display())));
    }
    let base = TrainConfig::load(&args.base)?;
    let variants = suite_variants(args.suite, &base)?;
    // Fail on a bad dataset before any training starts.
    DataDir::open(&args.data)?.require(&args.split)?;
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };
    let out = prepare_dir(&args.out, &["configs", "runs", "evals"])?;

    let mut results = Vec::new();
    for v in &variants {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let cfg = TrainConfig { seed, ..v.config.clone() };
            let tag = format!("{}-seed{seed}", v.name);
            let cfg_path = out.join("configs").join(format!("{tag}.toml"));
            write_config(&cfg_path, &cfg)?;
            let run = cmd_train(&TrainArgs {
                stage: cfg.stage,
                config: cfg_path,
                init: args.init.clone(),
                data: args.data.clone(),
                out: out.join("runs").join(&tag),
            })?;
            let eval = cmd_eval(&EvalArgs {
                checkpoint: Some(run.out.join(BEST_CHECKPOINT)),
                expert: false,
                data: args.data.clone(),
                split: args.split.clone(),
                reward: cfg.reward,
                out: out.join("evals").join(&tag),
            })?;
            per_seed.push(eval.mean);
        }
        let (field, value) = v.change.clone().unwrap_or_else(|| ("-".into(), "-".into()));
        results.push(VariantResult {
            variant: v.name.clone(),
            field,
            value,
            seeds: seeds.clone(),
            mean: mean_scores(&per_seed),
            per_seed,
        });
    }
    results.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.variant.cmp(&b.variant)));

    let csv = out.join(COMPARISON_FILE);
    fs::write(&csv, comparison_csv(&results)).map_err(io_at(&csv))?;
    let runs = out.join(RUNS_FILE);
    fs::write(&runs, serde_json::to_string_pretty(&results)? + "\n").map_err(io_at(&runs))?;
    let base_text = base.to_toml_string();
    let suite = format!("{:?}", args.suite);
    let mut m = RunManifest::new("ablate", derive_run_id(&["ablate", &suite, &base_text]));
    for &s in &seeds {
        m.seeds.insert(format!("train-{s}"), s);
    }
    m.seal(&out)?;
    Ok(results)
}
