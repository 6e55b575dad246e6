//! Running episodes with the policy or the expert, and replaying teacher paths.

use rand::Rng;

use crate::error::{contract, NavError, Result};
use crate::metrics::TrajectoryRecord;
use crate::policy::{sample_action, DropoutCtx, Policy, SampleMode, Session};
use crate::simenv::{Action, EpisodeState, Simulator};
use crate::topomap::TopoMap;
use crate::world::{Episode, NodeId, TaskId, WorldGraph};

/// One decision: the map it was made on, the chosen graph-token index, its
/// log-probability when sampled, and the candidate mask.
#[derive(Debug, Clone)]
pub struct DecisionStep {
    pub map: TopoMap,
    pub action: usize,
    pub logp: f64,
    pub mask: Vec<bool>,
}

/// Graph-token index (STOP = 0) to environment action.
pub fn token_to_action(map: &TopoMap, token: usize) -> Result<Action> {
    if token == 0 {
        return Ok(Action::Stop);
    }
    map.node_at(token)
        .map(Action::MoveTo)
        .ok_or_else(|| NavError::Contract(format!("graph token {token} is outside the map")))
}

pub fn action_to_token(map: &TopoMap, action: Action) -> Result<usize> {
    match action {
        Action::Stop => Ok(0),
        Action::MoveTo(v) => map
            .token_index(v)
            .ok_or_else(|| NavError::Contract(format!("node {v} is not on the map"))),
    }
}

/// Task id used for graph-token embeddings: the geometry style of the episode.
pub fn graph_task(ep: &Episode) -> TaskId {
    ep.style.task_id()
}

pub(crate) fn start(sim: &Simulator, max_steps: usize) -> Result<(EpisodeState, TopoMap)> {
    let (state, obs) = sim.reset();
    let mut map = TopoMap::new(max_steps);
    map.update(&obs)?;
    Ok((state, map))
}

pub(crate) fn advance(sim: &Simulator, state: &mut EpisodeState, map: &mut TopoMap, action: Action) -> Result<()> {
    if let Some(obs) = sim.step(state, action)? {
        map.update(&obs)?;
    }
    Ok(())
}

/// Runs the policy for a whole episode.
pub fn policy_rollout(
    policy: &Policy,
    world: &WorldGraph,
    ep: &Episode,
    mode: SampleMode,
    drop: DropoutCtx,
    rng: &mut impl Rng,
) -> Result<(TrajectoryRecord, Vec<DecisionStep>)> {
    let sim = Simulator::with_world(world, ep)?;
    let (mut state, mut map) = start(&sim, ep.max_steps)?;
    let mut session = Session::new(policy, &ep.instruction.tokens, ep.task_id, drop)?;
    let mut steps = Vec::new();
    while !state.done {
        let out = session.step(&map, graph_task(ep))?;
        let logits = out.masked_logits(&session.tape);
        let (action, logp) = sample_action(&logits, mode, rng)?;
        let a = token_to_action(&map, action)?;
        steps.push(DecisionStep {
            map: map.clone(),
            action,
            logp,
            mask: out.mask,
        });
        advance(&sim, &mut state, &mut map, a)?;
    }
    Ok((TrajectoryRecord::from_state(ep, &state), steps))
}

pub fn expert_record(world: &WorldGraph, ep: &Episode) -> Result<TrajectoryRecord> {
    let sim = Simulator::with_world(world, ep)?;
    let state = crate::simenv::expert_rollout(&sim)?;
    Ok(TrajectoryRecord::from_state(ep, &state))
}

/// Walks the reference path and returns the map before every decision with
/// the teacher's label (next reference node, then STOP).
pub fn teacher_states(world: &WorldGraph, ep: &Episode) -> Result<Vec<(TopoMap, usize)>> {
    let sim = Simulator::with_world(world, ep)?;
    let (mut state, mut map) = start(&sim, ep.max_steps)?;
    let path: &[NodeId] = &ep.reference_path;
    if path.first() != Some(&ep.start) {
        return contract(format!("episode {} reference path does not begin at its start", ep.id));
    }
    let mut out = Vec::with_capacity(path.len());
    for &next in &path[1..] {
        if state.done {
            return contract(format!("episode {} reference path exceeds the step limit", ep.id));
        }
        let label = action_to_token(&map, Action::MoveTo(next))?;
        out.push((map.clone(), label));
        advance(&sim, &mut state, &mut map, Action::MoveTo(next))?;
    }
    if state.done {
        return contract(format!("episode {} reference path exceeds the step limit", ep.id));
    }
    out.push((map, 0));
    Ok(out)
}
