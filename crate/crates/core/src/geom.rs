//! Planar geometry shared by the world, simulator, and map.

use std::f64::consts::{PI, TAU};

pub type Point = [f64; 2];

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// World-frame bearing from `a` to `b`, counter-clockwise from +x, in [0, 2π).
pub fn bearing(a: Point, b: Point) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0]).rem_euclid(TAU)
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Bearing of `target` seen from `from` with the given heading; positive is to the left.
pub fn relative_bearing(from: Point, heading: f64, target: Point) -> f64 {
    wrap_angle(bearing(from, target) - heading)
}

/// Index of the view sector containing a world-frame bearing, with `k`
/// sectors centred on multiples of 2π/k.
pub fn sector_of(bearing: f64, k: usize) -> usize {
    let width = TAU / k as f64;
    ((bearing.rem_euclid(TAU) / width).round() as usize) % k
}

/// Egocentric pose of `target` relative to an agent at `origin` facing `heading`:
/// `(forward, left, range, relative bearing)`.
pub fn egocentric(origin: Point, heading: f64, target: Point) -> (f64, f64, f64, f64) {
    let dx = target[0] - origin[0];
    let dy = target[1] - origin[1];
    let (s, c) = heading.sin_cos();
    let fwd = c * dx + s * dy;
    let left = -s * dx + c * dy;
    let r = (dx * dx + dy * dy).sqrt();
    let theta = if r == 0.0 { 0.0 } else { left.atan2(fwd) };
    (fwd, left, r, theta)
}
