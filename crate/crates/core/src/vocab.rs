//! Synthetic instruction vocabulary.

use std::f64::consts::PI;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const SEP: usize = 2;
pub const STOP_AT: usize = 3;
pub const TURN_AROUND: usize = 4;
pub const FORWARD: usize = 5;
pub const SLIGHT_LEFT: usize = 6;
pub const LEFT: usize = 7;
pub const SLIGHT_RIGHT: usize = 8;
pub const RIGHT: usize = 9;
/// First landmark token; landmark `l` renders as `LANDMARK_BASE + l`.
pub const LANDMARK_BASE: usize = 10;
pub const DEFAULT_VOCAB_SIZE: usize = 64;

const FORWARD_MAX: f64 = 30.0 * PI / 180.0;
const SLIGHT_MAX: f64 = 75.0 * PI / 180.0;
/// Relative bearings beyond this magnitude count as "backward".
pub const TURN_AROUND_MIN: f64 = 135.0 * PI / 180.0;

/// Direction token for a relative bearing in (-π, π] (positive = left), or
/// `TURN_AROUND` beyond ±135°.
pub fn direction_token(rel: f64) -> usize {
    let a = rel.abs();
    if a <= FORWARD_MAX {
        FORWARD
    } else if a <= SLIGHT_MAX {
        if rel > 0.0 {
            SLIGHT_LEFT
        } else {
            SLIGHT_RIGHT
        }
    } else if a <= TURN_AROUND_MIN {
        if rel > 0.0 {
            LEFT
        } else {
            RIGHT
        }
    } else {
        TURN_AROUND
    }
}

pub fn is_direction(tok: usize) -> bool {
    (FORWARD..=RIGHT).contains(&tok)
}

pub fn landmark_token(landmark: usize) -> usize {
    LANDMARK_BASE + landmark
}

pub fn landmark_of(tok: usize) -> Option<usize> {
    tok.checked_sub(LANDMARK_BASE)
}

pub fn max_landmarks(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(LANDMARK_BASE)
}
