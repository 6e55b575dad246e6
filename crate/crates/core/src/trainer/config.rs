//! Flat key-value training configuration with a schema version.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::metrics::RewardKind;
use crate::policy::PolicyConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Episode files a pretraining corpus may draw from.
pub const PRETRAIN_SOURCES: [&str; 3] = ["train", "extra", "aug"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Rft,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rft => "rft",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = NavError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "sft" => Ok(Stage::Sft),
            "rft" => Ok(Stage::Rft),
            other => Err(NavError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureSchedule {
    Off,
    /// Linear decay from `temperature_start` to `temperature_end` over the stage.
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` down to `lr * lr_min_ratio` at the last update.
    Cosine,
}

/// Everything a training stage needs. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lr_min_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Episodes per update.
    pub batch_size: usize,
    pub total_steps: usize,
    /// Evaluate and checkpoint every this many updates (and after the last one).
    pub eval_every: usize,
    /// Cap on validation episodes per evaluation; 0 means all.
    pub eval_episodes: usize,
    /// Pretraining corpus: `+`-joined subset of `train`, `extra` and `aug`.
    pub pretrain_data: String,

    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub pano_layers: usize,
    pub fusion_layers: usize,
    pub dropout: f64,

    pub mlm_mask_rate: f64,
    /// SAP batches per MLM batch.
    pub sap_per_mlm: usize,

    pub dagger_p_start: f64,
    pub dagger_p_end: f64,

    pub clip_eps: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub update_epochs: usize,
    pub sample_dropout: bool,
    pub frozen_dropout: bool,
    pub temperature: TemperatureSchedule,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub reward: RewardKind,
    /// Checkpoint selection rule for sft/rft: `r2r` (SR + SPL) or `rxr` (nDTW + SDTW).
    pub selection: RewardKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            stage: Stage::Pretrain,
            seed: 0,
            lr: 5e-4,
            lr_schedule: LrSchedule::Constant,
            lr_min_ratio: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            total_steps: 100,
            eval_every: 50,
            eval_episodes: 0,
            pretrain_data: "train+extra+aug".into(),
            d_model: p.d_model,
            heads: p.heads,
            ffn_dim: p.ffn_dim,
            text_layers: p.text_layers,
            pano_layers: p.pano_layers,
            fusion_layers: p.fusion_layers,
            dropout: p.dropout,
            mlm_mask_rate: 0.15,
            sap_per_mlm: 1,
            dagger_p_start: 0.75,
            dagger_p_end: 0.25,
            clip_eps: 0.2,
            kl_beta: 0.04,
            group_size: 8,
            update_epochs: 1,
            sample_dropout: true,
            frozen_dropout: true,
            temperature: TemperatureSchedule::Off,
            temperature_start: 2.0,
            temperature_end: 1.0,
            reward: RewardKind::R2r,
            selection: RewardKind::R2r,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| NavError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| NavError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NavError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        self.pretrain_sources()?;
        if !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return bad(format!("lr_min_ratio {} not in [0, 1]", self.lr_min_ratio));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mlm_mask_rate) {
            return bad(format!("mlm_mask_rate {} not in [0, 1)", self.mlm_mask_rate));
        }
        if self.sap_per_mlm == 0 {
            return bad("sap_per_mlm must be positive".into());
        }
        for p in [self.dagger_p_start, self.dagger_p_end] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("DAgger probability {p} not in [0, 1]"));
            }
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps {} must be positive", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl_beta {} must be non-negative", self.kl_beta));
        }
        if self.group_size < 2 {
            return bad(format!("group_size {} must be at least 2", self.group_size));
        }
        if self.update_epochs < 1 {
            return bad("update_epochs must be at least 1".into());
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        self.policy_config().validate()
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            text_layers: self.text_layers,
            pano_layers: self.pano_layers,
            fusion_layers: self.fusion_layers,
            dropout: self.dropout,
            ..PolicyConfig::default()
        }
    }

    /// Parsed `pretrain_data`, in the order written.
    pub fn pretrain_sources(&self) -> Result<Vec<&str>> {
        let mut out: Vec<&str> = Vec::new();
        for part in self.pretrain_data.split('+').map(str::trim) {
            if !PRETRAIN_SOURCES.contains(&part) {
                return Err(NavError::Config(format!(
                    "pretrain_data source {part:?} is not one of {PRETRAIN_SOURCES:?}"
                )));
            }
            if out.contains(&part) {
                return Err(NavError::Config(format!("pretrain_data lists {part:?} twice")));
            }
            out.push(part);
        }
        Ok(out)
    }

    /// Learning rate for update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = lerp(0.0, 1.0, step, self.total_steps);
                let scale = self.lr_min_ratio + (1.0 - self.lr_min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.lr * scale
            }
        }
    }

    /// DAgger expert probability at update `step` of `total_steps`, linear in between.
    pub fn dagger_p(&self, step: usize) -> f64 {
        lerp(self.dagger_p_start, self.dagger_p_end, step, self.total_steps)
    }

    /// Sampling temperature at update `step`.
    pub fn temperature_at(&self, step: usize) -> f64 {
        match self.temperature {
            TemperatureSchedule::Off => 1.0,
            TemperatureSchedule::Decay => lerp(self.temperature_start, self.temperature_end, step, self.total_steps),
        }
    }
}

fn lerp(a: f64, b: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return a;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    a + (b - a) * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = TrainConfig::for_stage(Stage::Rft);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::from_toml_str("schema_version = 1\nclip_epsilon = 0.3\n").unwrap_err();
        assert!(matches!(err, NavError::Config(_)));
        assert!(TrainConfig::from_toml_str("schema_version = 2\n").is_err());
        assert!(TrainConfig::from_toml_str("group_size = 1\n").is_err());
    }

    #[test]
    fn schedules_are_linear() {
        let cfg = TrainConfig {
            total_steps: 5,
            temperature: TemperatureSchedule::Decay,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.dagger_p(0), 0.75);
        assert_eq!(cfg.dagger_p(4), 0.25);
        assert_eq!(cfg.temperature_at(0), 2.0);
        assert_eq!(cfg.temperature_at(4), 1.0);
        assert_eq!(cfg.temperature_at(2), 1.5);
    }
}
