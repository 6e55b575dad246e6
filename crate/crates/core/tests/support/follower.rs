//! Literal instruction follower used as a test oracle. It re-derives the
//! geometry on its own: at each hop it looks for the single neighbour whose
//! direction bin (relative to the current heading) and landmark match the
//! next (direction, landmark) pair.

use toponav::vocab::{landmark_of, FORWARD, LEFT, RIGHT, SEP, SLIGHT_LEFT, SLIGHT_RIGHT, STOP_AT, TURN_AROUND};
use toponav::world::{NodeId, WorldGraph};

fn direction_bin(from: [f64; 2], heading: f64, to: [f64; 2]) -> usize {
    let world = (to[1] - from[1]).atan2(to[0] - from[0]);
    let mut rel = (world - heading).to_degrees() % 360.0;
    if rel > 180.0 {
        rel -= 360.0;
    } else if rel <= -180.0 {
        rel += 360.0;
    }
    let a = rel.abs();
    match a {
        a if a <= 30.0 => FORWARD,
        a if a <= 75.0 => {
            if rel > 0.0 {
                SLIGHT_LEFT
            } else {
                SLIGHT_RIGHT
            }
        }
        a if a <= 135.0 => {
            if rel > 0.0 {
                LEFT
            } else {
                RIGHT
            }
        }
        _ => TURN_AROUND,
    }
}

fn is_dir(t: usize) -> bool {
    matches!(t, FORWARD | SLIGHT_LEFT | LEFT | SLIGHT_RIGHT | RIGHT)
}

/// Follows `tokens` from `start` facing `heading`; `None` when the
/// instruction is malformed or some hop is not uniquely identified.
pub fn follow(world: &WorldGraph, start: NodeId, heading: f64, tokens: &[usize]) -> Option<Vec<NodeId>> {
    let mut heading = heading;
    let mut rest = tokens;
    if rest.first() == Some(&TURN_AROUND) {
        heading += std::f64::consts::PI;
        rest = &rest[1..];
    }
    if rest.last() != Some(&STOP_AT) {
        return None;
    }
    rest = &rest[..rest.len() - 1];
    let mut path = vec![start];
    let mut cur = start;
    for segment in rest.split(|&t| t == SEP) {
        if segment.is_empty() || segment.len() % 2 != 0 {
            return None;
        }
        for pair in segment.chunks(2) {
            let (dir, lm) = match (is_dir(pair[0]), is_dir(pair[1])) {
                (true, false) => (pair[0], landmark_of(pair[1])?),
                (false, true) => (pair[1], landmark_of(pair[0])?),
                _ => return None,
            };
            let here = world.position(cur);
            let matches: Vec<NodeId> = world
                .neighbors(cur)
                .iter()
                .map(|&(u, _)| u)
                .filter(|&u| world.landmark(u) == lm && direction_bin(here, heading, world.position(u)) == dir)
                .collect();
            if matches.len() != 1 {
                return None;
            }
            let next = matches[0];
            let p = world.position(next);
            heading = (p[1] - here[1]).atan2(p[0] - here[0]);
            path.push(next);
            cur = next;
        }
    }
    Some(path)
}
