//! Hand-evaluated reward cases on a small constructed world.
//!
//! Layout: a corridor 0-1-2-3-4 with 3 m spacing along x, a detour node 5 at
//! (3, 4) joined to 0 and 2 by 5 m edges, and node 6 sitting 1.5 m north of 3.
//! The goal is node 3. Geodesics to it: 0→9, 1→6, 2→3, 3→0, 4→3, 5→8, 6→1.5.

use toponav::metrics::TrajectoryRecord;
use toponav::world::*;

pub fn world() -> WorldGraph {
    let params = WorldParams { node_count: 7, degree: 2, landmark_count: 7, min_spacing: 1.0, ..WorldParams::default() };
    WorldGraph::from_record(WorldRecord {
        seed: 0,
        params,
        positions: vec![[0.0, 0.0], [3.0, 0.0], [6.0, 0.0], [9.0, 0.0], [12.0, 0.0], [3.0, 4.0], [9.0, 1.5]],
        edges: vec![[0, 1], [1, 2], [2, 3], [3, 4], [0, 5], [5, 2], [3, 6]],
        landmarks: vec![0, 1, 2, 3, 4, 5, 6],
    })
    .unwrap()
}

/// `E1` follows the corridor (9 m, equal to the geodesic); `E2` takes the
/// 13 m detour through node 5, so gSPL and SPL differ on it.
pub fn episode(detour: bool) -> Episode {
    let w = world();
    let path = if detour { vec![0, 5, 2, 3] } else { vec![0, 1, 2, 3] };
    Episode {
        id: if detour { "E2".into() } else { "E1".into() },
        world_seed: 0,
        style: PathStyle::Shortest,
        start: 0,
        start_heading: 0.0,
        goal: 3,
        instruction: render_instruction(&w, &path, 0.0, &[], &[Register::DirectionFirst], 1).unwrap(),
        reference_path: path,
        task_id: TaskId::Shortest,
        success_threshold: 3.0,
        max_steps: 20,
    }
}

pub struct Case {
    pub detour: bool,
    pub trace: Vec<NodeId>,
    pub length: f64,
    pub stop: bool,
    pub r2r: f64,
    pub rxr: f64,
}

impl Case {
    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            episode_id: if self.detour { "E2".into() } else { "E1".into() },
            trace: self.trace.clone(),
            length: self.length,
            final_node: *self.trace.last().unwrap(),
            stop_issued: self.stop,
            finished: true,
        }
    }
}

fn case(detour: bool, trace: &[NodeId], length: f64, stop: bool, r2r: f64, rxr: f64) -> Case {
    Case { detour, trace: trace.to_vec(), length, stop, r2r, rxr }
}

/// R2R reward: 1[d < 1.5] + SPL − d/6. RxR reward: nDTW + SDTW + gSPL − d/6,
/// with nDTW = exp(−DTW / (|R| · 3)) and |R| = 4 in every case.
pub fn cases() -> Vec<Case> {
    let e = |dtw: f64| (-dtw / 12.0_f64).exp();
    vec![
        // E1, reference 0-1-2-3.
        case(false, &[0, 1, 2, 3], 9.0, true, 2.0, 3.0),
        case(false, &[0, 5, 2, 3], 13.0, true, 1.0 + 9.0 / 13.0, 2.0 * e(8.0) + 9.0 / 13.0),
        // Stopping exactly 1.5 m from the goal: successful but no hit bonus.
        case(false, &[0, 1, 2, 3, 6], 10.5, true, 9.0 / 10.5 - 0.25, 2.0 * e(1.5) + 9.0 / 10.5 - 0.25),
        case(false, &[0, 1, 2, 3, 6], 10.5, false, -0.25, e(1.5) - 0.25),
        // Exactly at the 3 m success threshold counts as failure.
        case(false, &[0, 1, 2], 6.0, true, -0.5, e(3.0) - 0.5),
        case(false, &[0, 1, 2, 3, 4], 12.0, true, -0.5, e(3.0) - 0.5),
        case(false, &[0], 0.0, true, -1.5, e(18.0) - 1.5),
        case(false, &[0, 1], 3.0, true, -1.0, e(9.0) - 1.0),
        case(false, &[0, 1, 2, 3], 9.0, false, 1.0, 1.0),
        case(false, &[0, 1, 0, 1, 2, 3], 15.0, true, 1.6, 2.0 * e(3.0) + 0.6),
        case(false, &[0, 1, 2, 3, 4, 3], 15.0, true, 1.6, 2.0 * e(3.0) + 0.6),
        case(false, &[0, 1, 2, 3, 6, 3], 12.0, true, 1.75, 2.0 * e(1.5) + 0.75),
        case(false, &[0, 5, 2], 10.0, true, -0.5, e(11.0) - 0.5),
        // E2, reference 0-5-2-3 (13 m); the shortest route is 9 m.
        case(true, &[0, 5, 2, 3], 13.0, true, 1.0 + 9.0 / 13.0, 3.0),
        case(true, &[0, 1, 2, 3], 9.0, true, 2.0, 2.0 * e(8.0) + 1.0),
        case(true, &[0, 5, 2, 3, 6], 14.5, true, 9.0 / 14.5 - 0.25, 2.0 * e(1.5) + 13.0 / 14.5 - 0.25),
        case(true, &[0, 5], 5.0, true, -8.0 / 6.0, e(13.0) - 8.0 / 6.0),
        case(true, &[0, 1, 2, 3, 4], 12.0, true, -0.5, e(11.0) - 0.5),
        case(true, &[0, 5, 2, 3], 13.0, false, 1.0, 1.0),
        case(true, &[0, 5, 2, 1, 2, 3], 19.0, true, 1.0 + 9.0 / 19.0, 2.0 * e(3.0) + 13.0 / 19.0),
    ]
}
