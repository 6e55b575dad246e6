//! Navigation metrics and episode rewards.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::simenv::EpisodeState;
use crate::world::{Episode, NodeId, WorldGraph};

/// Indicator radius of the shortest-path reward, meters.
pub const REWARD_SUCCESS_RADIUS: f64 = 1.5;
/// Divisor of the final-distance penalty in both rewards.
pub const REWARD_DISTANCE_DIVISOR: f64 = 6.0;

pub const REPORT_HEADER: &str = "id,NE,SR,OSR,SPL,gSPL,nDTW,SDTW,reward";

/// What an agent did in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub trace: Vec<NodeId>,
    pub length: f64,
    pub final_node: NodeId,
    pub stop_issued: bool,
    pub finished: bool,
}

impl TrajectoryRecord {
    pub fn from_state(episode: &Episode, state: &EpisodeState) -> Self {
        TrajectoryRecord {
            episode_id: episode.id.clone(),
            trace: state.trace.clone(),
            length: state.length,
            final_node: state.current,
            stop_issued: state.stop_issued,
            finished: state.done,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    R2r,
    Rxr,
}

impl std::str::FromStr for RewardKind {
    type Err = crate::NavError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r2r" => Ok(RewardKind::R2r),
            "rxr" => Ok(RewardKind::Rxr),
            other => Err(crate::NavError::Config(format!("unknown reward kind {other:?}"))),
        }
    }
}

pub fn navigation_error(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    world.geodesic(traj.final_node, ep.goal)
}

pub fn success(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    if traj.stop_issued && navigation_error(world, traj, ep) < ep.success_threshold {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_success(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    let closest = traj
        .trace
        .iter()
        .map(|&v| world.geodesic(v, ep.goal))
        .fold(f64::INFINITY, f64::min);
    if closest < ep.success_threshold {
        1.0
    } else {
        0.0
    }
}

/// `success · L_best / max(L_traj, L_best)`.
pub fn path_weighted(success: f64, best: f64, travelled: f64) -> f64 {
    let denom = travelled.max(best);
    if success == 0.0 || denom <= 0.0 {
        return success;
    }
    success * best / denom
}

pub fn spl(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    path_weighted(success(world, traj, ep), world.geodesic(ep.start, ep.goal), traj.length)
}

pub fn gspl(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    let reference = world.path_length(&ep.reference_path).unwrap_or(f64::INFINITY);
    path_weighted(success(world, traj, ep), reference, traj.length)
}

/// Dynamic-time-warping cost between two sequences under `dist`.
/// An empty sequence against a non-empty one costs infinity; two empties cost 0.
pub fn dtw<T>(p: &[T], r: &[T], dist: impl Fn(&T, &T) -> f64) -> f64 {
    if p.is_empty() || r.is_empty() {
        return if p.is_empty() && r.is_empty() { 0.0 } else { f64::INFINITY };
    }
    let m = r.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for a in p {
        cur[0] = f64::INFINITY;
        for (j, b) in r.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = dist(a, b) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// `exp(-DTW(P, R) / (|R| · d_th))`.
pub fn ndtw_with<T>(p: &[T], r: &[T], d_th: f64, dist: impl Fn(&T, &T) -> f64) -> f64 {
    if r.is_empty() {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    (-dtw(p, r, dist) / (r.len() as f64 * d_th)).exp()
}

/// nDTW of the node trace against the reference path under geodesic distance,
/// with the episode's success threshold as `d_th`.
pub fn ndtw(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    ndtw_with(&traj.trace, &ep.reference_path, ep.success_threshold, |&a, &b| world.geodesic(a, b))
}

pub fn sdtw(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> f64 {
    success(world, traj, ep) * ndtw(world, traj, ep)
}

/// `I(d_final < 1.5) + SPL − d_final / 6`.
pub fn r2r_reward_value(d_final: f64, spl: f64) -> f64 {
    let hit = if d_final < REWARD_SUCCESS_RADIUS { 1.0 } else { 0.0 };
    hit + spl - d_final / REWARD_DISTANCE_DIVISOR
}

/// `nDTW + SDTW + gSPL − d_final / 6`.
pub fn rxr_reward_value(d_final: f64, ndtw: f64, sdtw: f64, gspl: f64) -> f64 {
    ndtw + sdtw + gspl - d_final / REWARD_DISTANCE_DIVISOR
}

pub fn reward_r2r(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> Result<f64> {
    if !traj.finished {
        return contract(format!("trajectory for {} is not finished", ep.id));
    }
    Ok(r2r_reward_value(navigation_error(world, traj, ep), spl(world, traj, ep)))
}

pub fn reward_rxr(world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> Result<f64> {
    if !traj.finished {
        return contract(format!("trajectory for {} is not finished", ep.id));
    }
    Ok(rxr_reward_value(
        navigation_error(world, traj, ep),
        ndtw(world, traj, ep),
        sdtw(world, traj, ep),
        gspl(world, traj, ep),
    ))
}

pub fn reward(kind: RewardKind, world: &WorldGraph, traj: &TrajectoryRecord, ep: &Episode) -> Result<f64> {
    match kind {
        RewardKind::R2r => reward_r2r(world, traj, ep),
        RewardKind::Rxr => reward_rxr(world, traj, ep),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub gspl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub reward: f64,
}

impl Scores {
    fn values(&self) -> [f64; 8] {
        [self.ne, self.sr, self.osr, self.spl, self.gspl, self.ndtw, self.sdtw, self.reward]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub id: String,
    pub scores: Scores,
}

pub fn evaluate_trajectory(
    world: &WorldGraph,
    traj: &TrajectoryRecord,
    ep: &Episode,
    kind: RewardKind,
) -> Result<EpisodeMetrics> {
    let scores = Scores {
        ne: navigation_error(world, traj, ep),
        sr: success(world, traj, ep),
        osr: oracle_success(world, traj, ep),
        spl: spl(world, traj, ep),
        gspl: gspl(world, traj, ep),
        ndtw: ndtw(world, traj, ep),
        sdtw: sdtw(world, traj, ep),
        reward: reward(kind, world, traj, ep)?,
    };
    Ok(EpisodeMetrics {
        id: ep.id.clone(),
        scores,
    })
}

/// Per-episode metric rows plus their unweighted means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<EpisodeMetrics>,
}

impl MetricReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Means over episodes; all zeros for an empty report.
    pub fn mean(&self) -> Scores {
        let n = self.rows.len();
        if n == 0 {
            return Scores::default();
        }
        let mut acc = [0.0; 8];
        for r in &self.rows {
            for (a, v) in acc.iter_mut().zip(r.scores.values()) {
                *a += v;
            }
        }
        let k = n as f64;
        Scores {
            ne: acc[0] / k,
            sr: acc[1] / k,
            osr: acc[2] / k,
            spl: acc[3] / k,
            gspl: acc[4] / k,
            ndtw: acc[5] / k,
            sdtw: acc[6] / k,
            reward: acc[7] / k,
        }
    }

    /// Header, one row per episode (six decimals), then a `mean` row with
    /// NE in meters, rates in percent and the mean reward, two decimals each.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.id);
            for v in r.scores.values() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        if !self.rows.is_empty() {
            let m = self.mean();
            let _ = writeln!(
                out,
                "mean,{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
                m.ne,
                100.0 * m.sr,
                100.0 * m.osr,
                100.0 * m.spl,
                100.0 * m.gspl,
                100.0 * m.ndtw,
                100.0 * m.sdtw,
                m.reward
            );
        }
        out
    }
}
