//! Group relative policy optimisation over whole navigation episodes.

use numcore::{Adam, Gradients};
use rand::Rng;

use crate::error::{contract, NavError, Result};
use crate::metrics::{reward, RewardKind, TrajectoryRecord};
use crate::policy::{DropoutCtx, Group, Policy, SampleMode, Session};
use crate::seeding::derive_seed;
use crate::world::{Episode, WorldGraph};

use super::rollout::{graph_task, policy_rollout, DecisionStep};

/// Groups that stay fixed during reinforcement fine-tuning.
pub const RFT_FROZEN: [Group; 3] = [Group::Text, Group::Node, Group::Mlm];
/// Groups updated during reinforcement fine-tuning.
pub const RFT_TRAINABLE: [Group; 2] = [Group::Fusion, Group::Sap];

/// Knobs of one GRPO update, mirroring the training config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoParams {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub update_epochs: usize,
    pub sample_dropout: bool,
    pub frozen_dropout: bool,
    pub temperature: f64,
    pub reward: RewardKind,
    pub mode: SampleMode,
}

impl Default for GrpoParams {
    fn default() -> Self {
        GrpoParams {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            update_epochs: 1,
            sample_dropout: true,
            frozen_dropout: true,
            temperature: 1.0,
            reward: RewardKind::R2r,
            mode: SampleMode::Sample,
        }
    }
}

/// Dropout while sampling: everything on iff `sample_dropout`, frozen groups
/// additionally need `frozen_dropout`.
pub fn sampling_dropout(rate: f64, seed: u64, p: &GrpoParams) -> DropoutCtx {
    DropoutCtx::new(rate, seed)
        .with_groups(&RFT_TRAINABLE, p.sample_dropout)
        .with_groups(&RFT_FROZEN, p.sample_dropout && p.frozen_dropout)
}

/// Dropout while recomputing log-probabilities for the update: trainable
/// groups always on, frozen groups on iff `frozen_dropout`.
pub fn update_dropout(rate: f64, seed: u64, p: &GrpoParams) -> DropoutCtx {
    DropoutCtx::new(rate, seed)
        .with_groups(&RFT_TRAINABLE, true)
        .with_groups(&RFT_FROZEN, p.frozen_dropout)
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<DecisionStep>,
    pub record: TrajectoryRecord,
    pub reward: f64,
}

/// `G` rollouts of one episode from a fixed policy snapshot.
#[derive(Debug, Clone)]
pub struct TrajectoryGroup {
    pub episode: Episode,
    /// Version of the policy that sampled the group.
    pub policy_version: u64,
    pub temperature: f64,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl TrajectoryGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Standardised rewards `(r - mean) / std` with the population standard
/// deviation; all zeros when the spread is below 1e-8.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return contract(format!("advantages need at least 2 rewards, got {}", rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(NavError::Contract("non-finite reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Samples `G` independent rollouts with `policy_old` and scores them.
pub fn grpo_sample_group(
    policy_old: &Policy,
    world: &WorldGraph,
    ep: &Episode,
    params: &GrpoParams,
    rng: &mut impl Rng,
) -> Result<TrajectoryGroup> {
    if params.mode == SampleMode::Greedy {
        return Err(NavError::Config("group sampling needs a stochastic mode, not greedy".into()));
    }
    if params.group_size < 2 {
        return Err(NavError::Config(format!("group size {} < 2", params.group_size)));
    }
    let mode = if params.temperature != 1.0 {
        SampleMode::Temperature(params.temperature)
    } else {
        params.mode
    };
    let rate = policy_old.config().dropout;
    let mut rollouts = Vec::with_capacity(params.group_size);
    for _ in 0..params.group_size {
        let drop = sampling_dropout(rate, rng.random(), params);
        let (record, steps) = policy_rollout(policy_old, world, ep, mode, drop, rng)?;
        let r = reward(params.reward, world, &record, ep)?;
        rollouts.push(Rollout {
            steps,
            record,
            reward: r,
        });
    }
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
    let advantages = compute_advantages(&rewards)?;
    Ok(TrajectoryGroup {
        episode: ep.clone(),
        policy_version: policy_old.version(),
        temperature: mode.temperature(),
        rollouts,
        advantages,
    })
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `π_ref/π − log(π_ref/π) − 1` from log-probabilities.
pub fn k3(logp_ref: f64, logp: f64) -> f64 {
    let d = logp_ref - logp;
    d.exp() - d - 1.0
}

/// Loss terms of one update pass, averaged over all steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrpoLoss {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub steps: usize,
}

/// Per-step diagnostics of a single pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub ratio: f64,
    pub k3: f64,
    pub objective: f64,
}

/// Log-probabilities of the recorded actions under `policy` with dropout off.
pub fn reference_logps(policy: &Policy, group: &TrajectoryGroup) -> Result<Vec<Vec<f64>>> {
    let ep = &group.episode;
    let mut out = Vec::with_capacity(group.rollouts.len());
    for r in &group.rollouts {
        if r.steps.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off())?;
        let mut lps = Vec::with_capacity(r.steps.len());
        for st in &r.steps {
            let o = s.step(&st.map, graph_task(ep))?;
            let scaled = s.tape.scale(o.logits, 1.0 / group.temperature)?;
            let lp = s.tape.log_prob(scaled, st.action, Some(&st.mask))?;
            lps.push(s.tape.value(lp).item()?);
        }
        out.push(lps);
    }
    Ok(out)
}

/// One pass of the GRPO objective: accumulates the gradient of
/// `−mean_steps[min(ρÂ, clip(ρ)Â) − β·k3]` into `grads` and returns the terms.
pub fn grpo_pass(
    policy: &Policy,
    groups: &[TrajectoryGroup],
    ref_logps: &[Vec<Vec<f64>>],
    params: &GrpoParams,
    dropout_seed: u64,
    grads: &mut Gradients,
    mut on_step: impl FnMut(StepTerms),
) -> Result<GrpoLoss> {
    let total: usize = groups.iter().flat_map(|g| g.rollouts.iter()).map(|r| r.steps.len()).sum();
    if total == 0 {
        return contract("GRPO update over groups without steps");
    }
    let inv = 1.0 / total as f64;
    let rate = policy.config().dropout;
    let mut acc = GrpoLoss {
        steps: total,
        ..GrpoLoss::default()
    };
    for (gi, group) in groups.iter().enumerate() {
        let ep = &group.episode;
        for (ri, (rollout, &adv)) in group.rollouts.iter().zip(&group.advantages).enumerate() {
            if rollout.steps.is_empty() {
                continue;
            }
            let drop = update_dropout(rate, derive_seed(dropout_seed, &[gi as u64, ri as u64]), params);
            let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, drop)?;
            let mut terms = Vec::with_capacity(rollout.steps.len());
            for (t, st) in rollout.steps.iter().enumerate() {
                let o = s.step(&st.map, graph_task(ep))?;
                let scaled = s.tape.scale(o.logits, 1.0 / group.temperature)?;
                let lp = s.tape.log_prob(scaled, st.action, Some(&st.mask))?;
                let old = s.tape.constant(numcore::Tensor::scalar(st.logp))?;
                let diff = s.tape.sub(lp, old)?;
                let ratio = s.tape.exp(diff)?;
                let unclipped = s.tape.scale(ratio, adv)?;
                let clipped = s.tape.clamp(ratio, 1.0 - params.clip_eps, 1.0 + params.clip_eps)?;
                let clipped = s.tape.scale(clipped, adv)?;
                let surrogate = s.tape.minimum(unclipped, clipped)?;
                // k3 = exp(ref − new) − (ref − new) − 1
                let rl = s.tape.constant(numcore::Tensor::scalar(ref_logps[gi][ri][t]))?;
                let d = s.tape.sub(rl, lp)?;
                let ed = s.tape.exp(d)?;
                let kl = s.tape.sub(ed, d)?;
                let one = s.tape.constant(numcore::Tensor::scalar(1.0))?;
                let kl = s.tape.sub(kl, one)?;
                let kl_val = s.tape.value(kl).item()?;
                let penalty = s.tape.scale(kl, params.kl_beta)?;
                let term = s.tape.sub(surrogate, penalty)?;
                terms.push(term);

                let r = s.tape.value(ratio).item()?;
                let obj = s.tape.value(surrogate).item()?;
                acc.surrogate += obj * inv;
                acc.kl += kl_val * inv;
                acc.mean_ratio += r * inv;
                if (r - r.clamp(1.0 - params.clip_eps, 1.0 + params.clip_eps)).abs() > 0.0 {
                    acc.clip_fraction += inv;
                }
                on_step(StepTerms {
                    ratio: r,
                    k3: kl_val,
                    objective: obj,
                });
            }
            let stacked = s.tape.concat_rows(&terms)?;
            let sum = s.tape.sum(stacked)?;
            let loss = s.tape.scale(sum, -inv)?;
            s.tape.backward(loss, grads)?;
        }
    }
    acc.loss = -(acc.surrogate - params.kl_beta * acc.kl);
    Ok(acc)
}

/// GRPO update on freshly sampled groups: `update_epochs` passes of
/// loss/backward/Adam. The groups are consumed; they must have been sampled
/// by the policy's current version.
pub fn grpo_update(
    policy: &mut Policy,
    policy_ref: &Policy,
    adam: &mut Adam,
    groups: Vec<TrajectoryGroup>,
    params: &GrpoParams,
    dropout_seed: u64,
) -> Result<Vec<GrpoLoss>> {
    if groups.is_empty() {
        return contract("GRPO update without groups");
    }
    for g in &groups {
        if g.policy_version != policy.version() {
            return contract(format!(
                "group for {} was sampled by policy version {}, but the policy is at version {}",
                g.episode.id,
                g.policy_version,
                policy.version()
            ));
        }
    }
    let refs: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| reference_logps(policy_ref, g))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(params.update_epochs);
    for epoch in 0..params.update_epochs {
        let mut grads = Gradients::for_store(policy.store());
        let l = grpo_pass(
            policy,
            &groups,
            &refs,
            params,
            derive_seed(dropout_seed, &[epoch as u64]),
            &mut grads,
            |_| {},
        )?;
        adam.step(policy.store_mut(), &mut grads)?;
        out.push(l);
    }
    policy.bump_version();
    Ok(out)
}
