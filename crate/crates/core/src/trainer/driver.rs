//! Stage loops tying the update rules to data, evaluation and checkpointing.

use numcore::{Adam, AdamConfig};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, NavError, Result};
use crate::metrics::Scores;
use crate::policy::{Group, Policy, PolicyConfig};
use crate::seeding::{derive_seed, label, rng_for, Rng as SeededRng};
use crate::world::{Episode, WorldSet};

use super::config::{Stage, TrainConfig};
use super::dagger::{dagger_rollout, sft_update};
use super::eval::{evaluate, navigation_score, select_checkpoint};
use super::grpo::{grpo_sample_group, grpo_update, GrpoParams, RFT_FROZEN};
use super::pretrain::{pretrain_accuracy, pretrain_step, pretrain_task, PretrainTask};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sap_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dagger_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grpo_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// Validation result attached to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Updates completed when the checkpoint was taken.
    pub step: usize,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sap_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm_accuracy: Option<f64>,
}

/// Receives training output as it is produced.
pub trait StageSink {
    fn log(&mut self, record: &LogRecord) -> Result<()>;
    fn checkpoint(&mut self, point: &EvalPoint, policy: &Policy) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<(EvalPoint, Policy)>,
}

impl StageSink for MemorySink {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        self.log.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, point: &EvalPoint, policy: &Policy) -> Result<()> {
        self.checkpoints.push((point.clone(), policy.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub evals: Vec<EvalPoint>,
    /// Index into `evals` of the selected checkpoint.
    pub selected: usize,
    pub best: Policy,
    pub last: Policy,
}

/// Cycles through a seeded reshuffle of the training set.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Batcher {
    fn new(n: usize, rng: SeededRng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.refill();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn adam_for(cfg: &TrainConfig, policy: &Policy) -> Adam {
    Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
        policy.store(),
    )
}

fn eval_slice<'a>(cfg: &TrainConfig, val: &'a [Episode]) -> &'a [Episode] {
    if cfg.eval_episodes == 0 {
        val
    } else {
        &val[..cfg.eval_episodes.min(val.len())]
    }
}

fn is_eval_step(cfg: &TrainConfig, done: usize) -> bool {
    done % cfg.eval_every == 0 || done == cfg.total_steps
}

/// Runs one training stage. `init` seeds the policy (required for RFT, which
/// also uses it as the frozen reference).
pub fn run_stage(
    cfg: &TrainConfig,
    init: Option<Policy>,
    worlds: &WorldSet,
    train: &[Episode],
    val: &[Episode],
    sink: &mut dyn StageSink,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return contract("no training episodes");
    }
    if val.is_empty() {
        return contract("no validation episodes");
    }
    if cfg.total_steps == 0 {
        return contract("total_steps must be positive");
    }
    let stage_label = label(&cfg.stage.to_string());
    if let Some(p) = &init {
        let want = PolicyConfig {
            dropout: p.config().dropout,
            ..cfg.policy_config()
        };
        if &want != p.config() {
            return Err(NavError::Config(format!(
                "config architecture {want:?} does not match the initial policy {:?}",
                p.config()
            )));
        }
    }
    let mut policy = match (&init, cfg.stage) {
        (Some(p), _) => p.clone(),
        (None, Stage::Rft) => return contract("reinforcement fine-tuning needs an initial policy"),
        (None, _) => Policy::new(cfg.policy_config(), derive_seed(cfg.seed, &[stage_label]))?,
    };
    policy.set_dropout(cfg.dropout)?;
    let reference = if cfg.stage == Stage::Rft {
        policy.freeze_groups(&RFT_FROZEN);
        let mut r = init.clone().expect("checked above");
        r.freeze_groups(&Group::ALL);
        Some(r)
    } else {
        policy.freeze_groups(&[]);
        None
    };
    let mut adam = adam_for(cfg, &policy);
    let mut batcher = Batcher::new(train.len(), rng_for(cfg.seed, &[stage_label, label("batches")]));
    let val = eval_slice(cfg, val);
    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut best: Option<Policy> = None;

    for step in 0..cfg.total_steps {
        let batch: Vec<&Episode> = batcher.next(cfg.batch_size).into_iter().map(|i| &train[i]).collect();
        let mut rng = rng_for(cfg.seed, &[stage_label, label("step"), step as u64]);
        let dropout_seed = derive_seed(cfg.seed, &[stage_label, label("dropout"), step as u64]);
        adam.config.lr = cfg.lr_at(step);
        let mut rec = LogRecord {
            stage: cfg.stage.to_string(),
            step,
            seed: cfg.seed,
            lr: cfg.lr_at(step),
            ..LogRecord::default()
        };
        match cfg.stage {
            Stage::Pretrain => {
                let task = pretrain_task(step, cfg.sap_per_mlm);
                let rate = if task == PretrainTask::Mlm { cfg.mlm_mask_rate } else { 0.0 };
                let l = pretrain_step(&mut policy, &mut adam, worlds, &batch, task, rate, dropout_seed, &mut rng)?;
                rec.sap_loss = l.sap;
                rec.mlm_loss = l.mlm;
            }
            Stage::Sft => {
                let p = cfg.dagger_p(step);
                let mut trajs = Vec::with_capacity(batch.len());
                for ep in &batch {
                    trajs.push(dagger_rollout(&policy, worlds.get(ep.world_seed)?, ep, p, &mut rng)?);
                }
                let n_steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
                let n_expert: usize = trajs
                    .iter()
                    .flat_map(|t| t.steps.iter())
                    .filter(|s| s.expert_executed)
                    .count();
                rec.sft_loss = Some(sft_update(&mut policy, &mut adam, &trajs, dropout_seed)?);
                rec.dagger_p = Some(p);
                rec.expert_fraction = Some(n_expert as f64 / n_steps.max(1) as f64);
            }
            Stage::Rft => {
                let params = grpo_params(cfg, step);
                let mut groups = Vec::with_capacity(batch.len());
                for ep in &batch {
                    groups.push(grpo_sample_group(&policy, worlds.get(ep.world_seed)?, ep, &params, &mut rng)?);
                }
                let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
                let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
                let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rewards.len() as f64;
                let reference = reference.as_ref().expect("reference policy exists in RFT");
                let losses = grpo_update(&mut policy, reference, &mut adam, groups, &params, dropout_seed)?;
                let last = losses.last().copied().unwrap_or_default();
                rec.reward_mean = Some(mean);
                rec.reward_std = Some(var.sqrt());
                rec.grpo_loss = Some(last.loss);
                rec.surrogate = Some(last.surrogate);
                rec.kl = Some(last.kl);
                rec.clip_fraction = Some(last.clip_fraction);
                rec.clip_eps = Some(cfg.clip_eps);
                rec.kl_beta = Some(cfg.kl_beta);
                rec.temperature = Some(params.temperature);
            }
        }
        sink.log(&rec)?;

        let done = step + 1;
        if is_eval_step(cfg, done) {
            let point = match cfg.stage {
                Stage::Pretrain => {
                    let (sap, mlm) = pretrain_accuracy(&policy, worlds, val, cfg.mlm_mask_rate, cfg.seed)?;
                    EvalPoint {
                        step: done,
                        score: sap + mlm,
                        metrics: None,
                        sap_accuracy: Some(sap),
                        mlm_accuracy: Some(mlm),
                    }
                }
                Stage::Sft | Stage::Rft => {
                    let m = evaluate(&policy, worlds, val, cfg.reward)?.mean();
                    EvalPoint {
                        step: done,
                        score: navigation_score(&m, cfg.selection),
                        metrics: Some(m),
                        sap_accuracy: None,
                        mlm_accuracy: None,
                    }
                }
            };
            sink.checkpoint(&point, &policy)?;
            let scores: Vec<f64> = evals.iter().map(|e| e.score).chain([point.score]).collect();
            if select_checkpoint(&scores)? == evals.len() {
                best = Some(policy.clone());
            }
            evals.push(point);
        }
    }
    let selected = select_checkpoint(&evals.iter().map(|e| e.score).collect::<Vec<_>>())?;
    policy.freeze_groups(&[]);
    let mut best = best.expect("at least one evaluation happened");
    best.freeze_groups(&[]);
    Ok(StageOutcome {
        evals,
        selected,
        best,
        last: policy,
    })
}

/// GRPO knobs for update `step` of an RFT config.
pub fn grpo_params(cfg: &TrainConfig, step: usize) -> GrpoParams {
    GrpoParams {
        group_size: cfg.group_size,
        clip_eps: cfg.clip_eps,
        kl_beta: cfg.kl_beta,
        update_epochs: cfg.update_epochs,
        sample_dropout: cfg.sample_dropout,
        frozen_dropout: cfg.frozen_dropout,
        temperature: cfg.temperature_at(step),
        reward: cfg.reward,
        mode: crate::policy::SampleMode::Sample,
    }
}
