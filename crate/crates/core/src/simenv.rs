//! Episode runtime: high-level waypoint actions over the ground-truth graph,
//! observations, termination, and the global-planner expert.

use std::collections::BTreeSet;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geom::{bearing, egocentric, Point};
use crate::world::{dijkstra_filtered, reconstruct_path, Episode, NodeId, PathStyle, WorldGraph, WorldSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Stop,
    MoveTo(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub current: NodeId,
    pub heading: f64,
    /// Meters travelled so far.
    pub length: f64,
    /// Every node passed through, starting with the start node.
    pub trace: Vec<NodeId>,
    pub steps: usize,
    pub done: bool,
    pub stop_issued: bool,
    visited: BTreeSet<NodeId>,
}

impl EpisodeState {
    pub fn visited(&self) -> &BTreeSet<NodeId> {
        &self.visited
    }
}

/// A navigable neighbour of the current node as seen by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborView {
    pub node: NodeId,
    /// Egocentric offset: meters ahead and to the left of the agent.
    pub forward: f64,
    pub left: f64,
    pub range: f64,
    /// Relative bearing, positive to the left.
    pub bearing: f64,
    pub sector: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub node: NodeId,
    pub step: usize,
    pub position: Point,
    pub heading: f64,
    /// `K × d_view` raw view features.
    pub views: Tensor,
    pub neighbors: Vec<NeighborView>,
}

/// One episode bound to its world.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    world: &'a WorldGraph,
    episode: &'a Episode,
}

impl<'a> Simulator<'a> {
    pub fn new(worlds: &'a WorldSet, episode: &'a Episode) -> Result<Self> {
        let world = worlds.get(episode.world_seed)?;
        Self::with_world(world, episode)
    }

    pub fn with_world(world: &'a WorldGraph, episode: &'a Episode) -> Result<Self> {
        if episode.world_seed != world.seed() {
            return contract(format!(
                "episode {} belongs to world {}, not {}",
                episode.id,
                episode.world_seed,
                world.seed()
            ));
        }
        let bad = [episode.start, episode.goal].into_iter().chain(episode.reference_path.iter().copied());
        for v in bad {
            if !world.contains(v) {
                return contract(format!("episode {} references unknown node {v}", episode.id));
            }
        }
        Ok(Simulator { world, episode })
    }

    pub fn world(&self) -> &'a WorldGraph {
        self.world
    }

    pub fn episode(&self) -> &'a Episode {
        self.episode
    }

    pub fn reset(&self) -> (EpisodeState, Observation) {
        let state = EpisodeState {
            current: self.episode.start,
            heading: self.episode.start_heading,
            length: 0.0,
            trace: vec![self.episode.start],
            steps: 0,
            done: self.episode.max_steps == 0,
            stop_issued: false,
            visited: BTreeSet::from([self.episode.start]),
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    pub fn observe(&self, state: &EpisodeState) -> Observation {
        let here = self.world.position(state.current);
        let neighbors = self
            .world
            .neighbors(state.current)
            .iter()
            .map(|&(u, _)| {
                let (forward, left, range, bearing) = egocentric(here, state.heading, self.world.position(u));
                NeighborView {
                    node: u,
                    forward,
                    left,
                    range,
                    bearing,
                    sector: self.world.sector_towards(state.current, u),
                }
            })
            .collect();
        Observation {
            node: state.current,
            step: state.steps,
            position: here,
            heading: state.heading,
            views: self.world.view_features(state.current).clone(),
            neighbors,
        }
    }

    /// Frontier nodes: neighbours of visited nodes that were not visited yet, ascending.
    pub fn candidates(&self, state: &EpisodeState) -> Vec<NodeId> {
        let mut out = BTreeSet::new();
        for &v in &state.visited {
            for &(u, _) in self.world.neighbors(v) {
                if !state.visited.contains(&u) {
                    out.insert(u);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Applies a high-level action. Moving to a frontier node walks the
    /// shortest route through already visited nodes. Returns the new
    /// observation, or `None` once the episode is over.
    pub fn step(&self, state: &mut EpisodeState, action: Action) -> Result<Option<Observation>> {
        if state.done {
            return contract(format!("episode {} is already finished", self.episode.id));
        }
        match action {
            Action::Stop => {
                state.done = true;
                state.stop_issued = true;
                state.steps += 1;
                return Ok(None);
            }
            Action::MoveTo(target) => {
                if !self.world.contains(target) {
                    return contract(format!("unknown node {target}"));
                }
                if state.visited.contains(&target) || !self.candidates(state).contains(&target) {
                    return contract(format!("node {target} is not a frontier node"));
                }
                let (dist, prev) = dijkstra_filtered(self.world.adjacency(), state.current, |v| {
                    v == target || state.visited.contains(&v)
                });
                let route = reconstruct_path(&prev, state.current, target)
                    .ok_or_else(|| crate::NavError::Contract(format!("node {target} unreachable")))?;
                for w in route.windows(2) {
                    state.length += self.world.edge_length(w[0], w[1]).unwrap_or(f64::NAN);
                    state.trace.push(w[1]);
                }
                debug_assert!((dist[target] - self.world.path_length(&route).unwrap_or(0.0)).abs() < 1e-9);
                let n = route.len();
                state.heading = bearing(self.world.position(route[n - 2]), self.world.position(route[n - 1]));
                state.current = target;
                state.visited.insert(target);
                state.steps += 1;
                if state.steps >= self.episode.max_steps {
                    state.done = true;
                    return Ok(None);
                }
                Ok(Some(self.observe(state)))
            }
        }
    }

    /// Global-planner action for the current state. Shortest-path episodes
    /// head for the goal; meandering episodes head for the earliest reference
    /// node not yet visited. Ties go to the lowest node id.
    pub fn expert_action(&self, state: &EpisodeState) -> Action {
        let ep = self.episode;
        let near_goal = self.world.geodesic(state.current, ep.goal) < ep.success_threshold;
        let target = match ep.style {
            PathStyle::Shortest => {
                if near_goal {
                    return Action::Stop;
                }
                ep.goal
            }
            PathStyle::Meandering => match ep.reference_path.iter().find(|v| !state.visited.contains(v)) {
                Some(&v) => v,
                None if near_goal => return Action::Stop,
                None => ep.goal,
            },
        };
        let mut best: Option<(f64, NodeId)> = None;
        for c in self.candidates(state) {
            let d = self.world.geodesic(c, target);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        best.map_or(Action::Stop, |(_, c)| Action::MoveTo(c))
    }
}

/// Rolls the expert out from reset and returns the final state.
pub fn expert_rollout(sim: &Simulator) -> Result<EpisodeState> {
    let (mut state, _) = sim.reset();
    while !state.done {
        let a = sim.expert_action(&state);
        sim.step(&mut state, a)?;
    }
    Ok(state)
}
