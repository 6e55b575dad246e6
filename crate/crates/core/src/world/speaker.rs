//! Rule-based instruction synthesis.
//!
//! A reference path is cut into contiguous segments; each hop renders as a
//! direction token (relative to the heading on arrival) and the landmark token
//! of the node it reaches. Segments are joined by `SEP` and the instruction
//! ends with `STOP_AT`.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NodeId, WorldGraph};
use crate::error::{contract, Result};
use crate::geom::{bearing, relative_bearing, wrap_angle};
use crate::vocab::{direction_token, landmark_token, SEP, STOP_AT, TURN_AROUND, TURN_AROUND_MIN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub tokens: Vec<usize>,
    pub task_id: u8,
    /// Hop ranges `[first, last)` covered by each segment.
    pub segments: Vec<[usize; 2]>,
}

/// Word order used when describing the hops of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Register {
    /// "left, (to the) fountain"
    DirectionFirst,
    /// "(to the) fountain, on the left"
    LandmarkFirst,
}

/// Whether the first move calls for turning around, and the heading against
/// which the first hop's direction is rendered (flipped when turning around).
pub fn first_hop_heading(world: &WorldGraph, path: &[NodeId], start_heading: f64) -> (bool, f64) {
    if path.len() < 2 {
        return (false, start_heading);
    }
    let rel = relative_bearing(world.position(path[0]), start_heading, world.position(path[1]));
    if rel.abs() > TURN_AROUND_MIN {
        (true, wrap_angle(start_heading + PI).rem_euclid(2.0 * PI))
    } else {
        (false, start_heading)
    }
}

/// Heading in force before each hop: the (possibly flipped) start heading for
/// the first hop, the arrival direction afterwards.
pub(crate) fn hop_headings(world: &WorldGraph, path: &[NodeId], start_heading: f64) -> (bool, Vec<f64>) {
    let (turn, h0) = first_hop_heading(world, path, start_heading);
    let mut out = Vec::with_capacity(path.len().saturating_sub(1));
    for i in 0..path.len().saturating_sub(1) {
        if i == 0 {
            out.push(h0);
        } else {
            out.push(bearing(world.position(path[i - 1]), world.position(path[i])));
        }
    }
    (turn, out)
}

fn check_path(world: &WorldGraph, path: &[NodeId]) -> Result<()> {
    if path.len() < 2 {
        return contract("a reference path needs at least one hop");
    }
    if let Some(&v) = path.iter().find(|&&v| !world.contains(v)) {
        return contract(format!("node {v} is not in world {}", world.seed()));
    }
    world.path_length(path)?;
    Ok(())
}

/// Renders a path with explicit cut points and per-segment registers.
/// `cuts` are the strictly increasing hop indices (in `1..hops`) where a new
/// segment starts.
pub fn render_instruction(
    world: &WorldGraph,
    path: &[NodeId],
    start_heading: f64,
    cuts: &[usize],
    registers: &[Register],
    task_id: u8,
) -> Result<Instruction> {
    check_path(world, path)?;
    let hops = path.len() - 1;
    if registers.len() != cuts.len() + 1 {
        return contract(format!("{} registers for {} segments", registers.len(), cuts.len() + 1));
    }
    if cuts.windows(2).any(|w| w[0] >= w[1]) || cuts.iter().any(|&c| c == 0 || c >= hops) {
        return contract(format!("invalid cut points {cuts:?} for {hops} hops"));
    }
    let (turn, headings) = hop_headings(world, path, start_heading);
    let mut bounds = vec![0];
    bounds.extend_from_slice(cuts);
    bounds.push(hops);
    let mut tokens = Vec::new();
    if turn {
        tokens.push(TURN_AROUND);
    }
    let mut segments = Vec::with_capacity(registers.len());
    for (s, reg) in registers.iter().enumerate() {
        if s > 0 {
            tokens.push(SEP);
        }
        let (a, b) = (bounds[s], bounds[s + 1]);
        for hop in a..b {
            let rel = relative_bearing(world.position(path[hop]), headings[hop], world.position(path[hop + 1]));
            let dir = direction_token(rel);
            let lm = landmark_token(world.landmark(path[hop + 1]));
            match reg {
                Register::DirectionFirst => tokens.extend([dir, lm]),
                Register::LandmarkFirst => tokens.extend([lm, dir]),
            }
        }
        segments.push([a, b]);
    }
    tokens.push(STOP_AT);
    Ok(Instruction { tokens, task_id, segments })
}

/// Draws `n_segments - 1` distinct cut hops uniformly from `1..hops`.
pub(crate) fn draw_cuts(hops: usize, n_segments: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n_segments == 0 || n_segments > hops {
        return contract(format!("cannot split {hops} hops into {n_segments} segments"));
    }
    let mut cuts: Vec<usize> = sample(rng, hops - 1, n_segments - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    Ok(cuts)
}

/// Splits the path into `n_segments` random contiguous pieces and renders each
/// with a randomly drawn register.
pub fn synthesize_instruction(
    world: &WorldGraph,
    path: &[NodeId],
    start_heading: f64,
    n_segments: usize,
    task_id: u8,
    rng: &mut impl Rng,
) -> Result<Instruction> {
    check_path(world, path)?;
    let cuts = draw_cuts(path.len() - 1, n_segments, rng)?;
    let registers: Vec<Register> = (0..n_segments)
        .map(|_| {
            if rng.random::<bool>() {
                Register::DirectionFirst
            } else {
                Register::LandmarkFirst
            }
        })
        .collect();
    render_instruction(world, path, start_heading, &cuts, &registers, task_id)
}
