//! Greedy evaluation and checkpoint selection.

use crate::error::{contract, Result};
use crate::metrics::{evaluate_trajectory, MetricReport, RewardKind, Scores};
use crate::policy::{DropoutCtx, Policy, SampleMode};
use crate::seeding::rng_for;
use crate::world::{Episode, WorldSet};

use super::rollout::{expert_record, policy_rollout};

/// Greedy, dropout-free evaluation of `policy` on every episode.
pub fn evaluate(policy: &Policy, worlds: &WorldSet, episodes: &[Episode], kind: RewardKind) -> Result<MetricReport> {
    let mut rng = rng_for(0, &[]);
    let mut rows = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let world = worlds.get(ep.world_seed)?;
        let (record, _) = policy_rollout(policy, world, ep, SampleMode::Greedy, DropoutCtx::off(), &mut rng)?;
        rows.push(evaluate_trajectory(world, &record, ep, kind)?);
    }
    Ok(MetricReport { rows })
}

/// Evaluation of the global-planner expert.
pub fn evaluate_expert(worlds: &WorldSet, episodes: &[Episode], kind: RewardKind) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let world = worlds.get(ep.world_seed)?;
        let record = expert_record(world, ep)?;
        rows.push(evaluate_trajectory(world, &record, ep, kind)?);
    }
    Ok(MetricReport { rows })
}

/// Selection score for navigation checkpoints: SR + SPL for shortest-path
/// data, nDTW + SDTW for path-fidelity data.
pub fn navigation_score(scores: &Scores, style: RewardKind) -> f64 {
    match style {
        RewardKind::R2r => scores.sr + scores.spl,
        RewardKind::Rxr => scores.ndtw + scores.sdtw,
    }
}

/// Index of the best score; ties go to the earliest entry.
pub fn select_checkpoint(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return contract("no evaluated checkpoints to select from");
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}
