use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::speaker::{hop_headings, synthesize_instruction, Instruction};
use super::{NodeId, WorldGraph};
use crate::error::{NavError, Result};
use crate::geom::{bearing, relative_bearing};
use crate::seeding::{label, rng_for};
use crate::vocab::{direction_token, TURN_AROUND_MIN};

/// Dataset id fed to the task embeddings; serialized as its integer value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum TaskId {
    Shortest = 1,
    Meandering = 2,
    Augmented = 3,
}

impl From<TaskId> for u8 {
    fn from(t: TaskId) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for TaskId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        TaskId::from_index(v as usize).ok_or_else(|| format!("task id {v} is not 1, 2 or 3"))
    }
}

impl TaskId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TaskId> {
        match i {
            1 => Some(TaskId::Shortest),
            2 => Some(TaskId::Meandering),
            3 => Some(TaskId::Augmented),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathStyle {
    Shortest,
    Meandering,
}

impl PathStyle {
    pub fn task_id(self) -> TaskId {
        match self {
            PathStyle::Shortest => TaskId::Shortest,
            PathStyle::Meandering => TaskId::Meandering,
        }
    }
}

impl std::str::FromStr for PathStyle {
    type Err = NavError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shortest" | "r2r" => Ok(PathStyle::Shortest),
            "meandering" | "rxr" => Ok(PathStyle::Meandering),
            other => Err(NavError::Config(format!("unknown path style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeParams {
    /// Geodesic start-goal distance band, meters.
    pub min_len: f64,
    pub max_len: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    pub max_tokens: usize,
    pub success_threshold: f64,
    pub max_steps: usize,
    /// Candidate (start, goal, detour) draws before giving up.
    pub attempts: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams {
            min_len: 10.0,
            max_len: 30.0,
            min_hops: 3,
            max_hops: 10,
            max_tokens: 48,
            success_threshold: 3.0,
            max_steps: 20,
            attempts: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub id: String,
    pub world_seed: u64,
    pub style: PathStyle,
    pub start: NodeId,
    pub start_heading: f64,
    pub goal: NodeId,
    pub reference_path: Vec<NodeId>,
    pub instruction: Instruction,
    pub task_id: TaskId,
    pub success_threshold: f64,
    pub max_steps: usize,
}

impl Episode {
    pub fn hops(&self) -> usize {
        self.reference_path.len().saturating_sub(1)
    }
}

fn is_simple(path: &[NodeId]) -> bool {
    let mut seen = std::collections::HashSet::with_capacity(path.len());
    path.iter().all(|v| seen.insert(*v))
}

/// True when every hop after the first bends by at most the turn-around threshold.
fn no_u_turns(world: &WorldGraph, path: &[NodeId]) -> bool {
    path.windows(3).all(|w| {
        let arrival = bearing(world.position(w[0]), world.position(w[1]));
        relative_bearing(world.position(w[1]), arrival, world.position(w[2])).abs() <= TURN_AROUND_MIN
    })
}

/// True when at every hop no other neighbour shares the next node's
/// direction token and landmark, so a literal reading of the instruction
/// identifies each hop.
pub(crate) fn unambiguous(world: &WorldGraph, path: &[NodeId], start_heading: f64) -> bool {
    let (_, headings) = hop_headings(world, path, start_heading);
    for (hop, &h) in headings.iter().enumerate() {
        let here = path[hop];
        let key = |u: NodeId| {
            (
                direction_token(relative_bearing(world.position(here), h, world.position(u))),
                world.landmark(u),
            )
        };
        let want = key(path[hop + 1]);
        let clashes = world
            .neighbors(here)
            .iter()
            .filter(|&&(u, _)| u != path[hop + 1] && key(u) == want)
            .count();
        if clashes > 0 {
            return false;
        }
    }
    true
}

/// True when repeatedly moving to the frontier node geodesically closest to
/// the goal (ties to the lowest id) walks exactly along `path` without passing
/// within `threshold` of the goal early.
fn greedy_follows(world: &WorldGraph, path: &[NodeId], threshold: f64) -> bool {
    let goal = *path.last().expect("non-empty path");
    let mut visited = std::collections::BTreeSet::new();
    for (i, &v) in path[..path.len() - 1].iter().enumerate() {
        if world.geodesic(v, goal) < threshold {
            return false;
        }
        visited.insert(v);
        let mut best: Option<(f64, NodeId)> = None;
        let frontier: std::collections::BTreeSet<NodeId> = visited
            .iter()
            .flat_map(|&u| world.neighbors(u).iter().map(|&(x, _)| x))
            .filter(|x| !visited.contains(x))
            .collect();
        for c in frontier {
            let d = world.geodesic(c, goal);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        if best.map(|(_, c)| c) != Some(path[i + 1]) {
            return false;
        }
    }
    true
}

fn concat_legs(world: &WorldGraph, stops: &[NodeId]) -> Option<Vec<NodeId>> {
    let mut path = vec![stops[0]];
    for w in stops.windows(2) {
        let leg = world.shortest_path(w[0], w[1])?;
        path.extend_from_slice(&leg[1..]);
    }
    Some(path)
}

/// Samples one episode; identical `(world, seed, style, params)` give identical episodes.
pub fn sample_episode(world: &WorldGraph, seed: u64, style: PathStyle, params: &EpisodeParams) -> Result<Episode> {
    if !(params.min_len <= params.max_len) || params.min_hops == 0 || params.min_hops > params.max_hops {
        return Err(NavError::Config(format!("inconsistent episode params {params:?}")));
    }
    let n = world.node_count();
    let pairs: Vec<(NodeId, NodeId)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| {
            let d = world.geodesic(a, b);
            a != b && d >= params.min_len && d <= params.max_len
        })
        .collect();
    if pairs.is_empty() {
        return Err(NavError::Sampling(format!(
            "world {} has no node pair with geodesic distance in [{}, {}]",
            world.seed(),
            params.min_len,
            params.max_len
        )));
    }
    let mut rng = rng_for(seed, &[label("episode"), world.seed()]);
    for _ in 0..params.attempts {
        let (start, goal) = pairs[rng.random_range(0..pairs.len())];
        let path = match style {
            PathStyle::Shortest => world.shortest_path(start, goal),
            PathStyle::Meandering => {
                let k = rng.random_range(1..=2usize);
                let mut stops = vec![start];
                for _ in 0..k {
                    stops.push(rng.random_range(0..n));
                }
                stops.push(goal);
                concat_legs(world, &stops)
            }
        };
        let Some(path) = path else { continue };
        let hops = path.len() - 1;
        if hops < params.min_hops || hops > params.max_hops || !is_simple(&path) || !no_u_turns(world, &path) {
            continue;
        }
        if style == PathStyle::Shortest && !greedy_follows(world, &path, params.success_threshold) {
            continue;
        }
        if style == PathStyle::Meandering {
            let len = world.path_length(&path)?;
            if len <= world.geodesic(start, goal) + 1e-9 {
                continue;
            }
        }
        let start_heading = rng.random::<f64>() * TAU;
        if !unambiguous(world, &path, start_heading) {
            continue;
        }
        let n_segments = rng.random_range(1..=3usize).min(hops);
        let task = style.task_id();
        let instruction = synthesize_instruction(world, &path, start_heading, n_segments, task as u8, &mut rng)?;
        if instruction.tokens.len() > params.max_tokens {
            continue;
        }
        return Ok(Episode {
            id: format!("w{}-s{}", world.seed(), seed),
            world_seed: world.seed(),
            style,
            start,
            start_heading,
            goal,
            reference_path: path,
            instruction,
            task_id: task,
            success_threshold: params.success_threshold,
            max_steps: params.max_steps,
        });
    }
    Err(NavError::Sampling(format!(
        "no valid {style:?} episode in world {} after {} attempts",
        world.seed(),
        params.attempts
    )))
}
