//! DAgger fine-tuning: mixed expert/policy execution, always expert-labelled.

use numcore::{Adam, Gradients};
use rand::Rng;

use crate::error::{contract, Result};
use crate::metrics::TrajectoryRecord;
use crate::policy::{sample_action, DropoutCtx, Group, Policy, SampleMode, Session};
use crate::simenv::Simulator;
use crate::topomap::TopoMap;
use crate::world::{Episode, WorldGraph};

use super::rollout::{action_to_token, advance, graph_task, start, token_to_action};

#[derive(Debug, Clone)]
pub struct LabeledStep {
    pub map: TopoMap,
    /// Expert choice as a graph-token index.
    pub label: usize,
    /// Token actually executed.
    pub executed: usize,
    pub expert_executed: bool,
}

#[derive(Debug, Clone)]
pub struct LabeledTrajectory {
    pub episode: Episode,
    pub steps: Vec<LabeledStep>,
    pub record: TrajectoryRecord,
}

/// Rolls out one episode, executing the expert with probability `p` and a
/// policy sample otherwise; every state is labelled with the expert action.
pub fn dagger_rollout(
    policy: &Policy,
    world: &WorldGraph,
    ep: &Episode,
    p: f64,
    rng: &mut impl Rng,
) -> Result<LabeledTrajectory> {
    if !(0.0..=1.0).contains(&p) {
        return Err(crate::NavError::Config(format!("DAgger probability {p} not in [0, 1]")));
    }
    let sim = Simulator::with_world(world, ep)?;
    let (mut state, mut map) = start(&sim, ep.max_steps)?;
    let mut session: Option<Session> = None;
    let mut steps = Vec::new();
    while !state.done {
        let expert = sim.expert_action(&state);
        let label = action_to_token(&map, expert)?;
        let use_expert = rng.random::<f64>() < p;
        let executed = if use_expert {
            label
        } else {
            if session.is_none() {
                session = Some(Session::new(policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off())?);
            }
            let s = session.as_mut().expect("session initialised above");
            let out = s.step(&map, graph_task(ep))?;
            sample_action(&out.masked_logits(&s.tape), SampleMode::Sample, rng)?.0
        };
        steps.push(LabeledStep {
            map: map.clone(),
            label,
            executed,
            expert_executed: use_expert,
        });
        let a = token_to_action(&map, executed)?;
        advance(&sim, &mut state, &mut map, a)?;
    }
    Ok(LabeledTrajectory {
        episode: ep.clone(),
        steps,
        record: TrajectoryRecord::from_state(ep, &state),
    })
}

/// Cross-entropy of the expert labels over every recorded state (flat mean),
/// followed by one Adam step. Returns the loss.
pub fn sft_update(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &[LabeledTrajectory],
    dropout_seed: u64,
) -> Result<f64> {
    let total: usize = batch.iter().map(|t| t.steps.len()).sum();
    if batch.is_empty() || total == 0 {
        return contract("empty SFT batch");
    }
    let rate = policy.config().dropout;
    let mut grads = Gradients::for_store(policy.store());
    let mut sum = 0.0;
    for (i, traj) in batch.iter().enumerate() {
        if traj.steps.is_empty() {
            continue;
        }
        let drop = DropoutCtx::new(rate, crate::seeding::derive_seed(dropout_seed, &[i as u64]))
            .with_groups(&Group::ALL, true);
        let ep = &traj.episode;
        let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, drop)?;
        let mut losses = Vec::with_capacity(traj.steps.len());
        for st in &traj.steps {
            let out = s.step(&st.map, graph_task(ep))?;
            losses.push(s.tape.cross_entropy(out.logits, &[st.label], Some(&out.mask))?);
        }
        let stacked = s.tape.concat_rows(&losses)?;
        let l = s.tape.sum(stacked)?;
        sum += s.tape.value(l).item()?;
        let l = s.tape.scale(l, 1.0 / total as f64)?;
        s.tape.backward(l, &mut grads)?;
    }
    adam.step(policy.store_mut(), &mut grads)?;
    policy.bump_version();
    Ok(sum / total as f64)
}
