use toponav::simenv::*;
use toponav::topomap::*;
use toponav::world::*;

/// Straight corridor 0-1-2-3-4 along the x axis with a spur 2-5 to the north.
fn corridor() -> WorldGraph {
    let params = WorldParams { node_count: 6, degree: 2, landmark_count: 6, ..WorldParams::default() };
    WorldGraph::from_record(WorldRecord {
        seed: 0,
        params,
        positions: vec![[0.0, 0.0], [5.0, 0.0], [10.0, 0.0], [15.0, 0.0], [20.0, 0.0], [10.0, 5.0]],
        edges: vec![[0, 1], [1, 2], [2, 3], [3, 4], [2, 5]],
        landmarks: vec![0, 1, 2, 3, 4, 5],
    })
    .unwrap()
}

fn corridor_episode(goal: NodeId) -> Episode {
    let w = corridor();
    let path = w.shortest_path(0, goal).unwrap();
    Episode {
        id: "corridor".into(),
        world_seed: 0,
        style: PathStyle::Shortest,
        start: 0,
        start_heading: 0.0,
        goal,
        reference_path: path.clone(),
        instruction: render_instruction(&w, &path, 0.0, &[], &[Register::DirectionFirst], 1).unwrap(),
        task_id: TaskId::Shortest,
        success_threshold: 3.0,
        max_steps: 20,
    }
}

#[test]
fn reset_observes_start_and_neighbours() {
    let w = corridor();
    let ep = corridor_episode(4);
    let sim = Simulator::with_world(&w, &ep).unwrap();
    let (st, obs) = sim.reset();
    assert_eq!(st.current, 0);
    assert_eq!(st.trace, vec![0]);
    assert_eq!(obs.neighbors.len(), 1);
    let nb = &obs.neighbors[0];
    assert_eq!(nb.node, 1);
    assert!((nb.forward - 5.0).abs() < 1e-12 && nb.left.abs() < 1e-12);
    assert_eq!(sim.candidates(&st), vec![1]);
}

#[test]
fn moving_to_frontier_routes_through_known_nodes() {
    let w = corridor();
    let ep = corridor_episode(4);
    let sim = Simulator::with_world(&w, &ep).unwrap();
    let (mut st, _) = sim.reset();
    sim.step(&mut st, Action::MoveTo(1)).unwrap();
    sim.step(&mut st, Action::MoveTo(2)).unwrap();
    assert_eq!(sim.candidates(&st), vec![3, 5]);
    sim.step(&mut st, Action::MoveTo(5)).unwrap();
    // From the spur, node 3 is reached back through 2.
    sim.step(&mut st, Action::MoveTo(3)).unwrap();
    assert_eq!(st.trace, vec![0, 1, 2, 5, 2, 3]);
    assert!((st.length - 25.0).abs() < 1e-12);
    assert_eq!(st.steps, 4);
}

#[test]
fn invalid_actions_are_rejected() {
    let w = corridor();
    let ep = corridor_episode(4);
    let sim = Simulator::with_world(&w, &ep).unwrap();
    let (mut st, _) = sim.reset();
    assert!(sim.step(&mut st, Action::MoveTo(3)).is_err());
    assert!(sim.step(&mut st, Action::MoveTo(99)).is_err());
    sim.step(&mut st, Action::Stop).unwrap();
    assert!(st.done && st.stop_issued);
    assert!(sim.step(&mut st, Action::MoveTo(1)).is_err());
}

#[test]
fn step_limit_ends_episode_without_stop() {
    let w = corridor();
    let mut ep = corridor_episode(4);
    ep.max_steps = 2;
    let sim = Simulator::with_world(&w, &ep).unwrap();
    let (mut st, _) = sim.reset();
    sim.step(&mut st, Action::MoveTo(1)).unwrap();
    sim.step(&mut st, Action::MoveTo(2)).unwrap();
    assert!(st.done);
    assert!(!st.stop_issued);
}

#[test]
fn expert_walks_the_corridor_and_stops_in_range() {
    let w = corridor();
    let ep = corridor_episode(4);
    let sim = Simulator::with_world(&w, &ep).unwrap();
    let st = expert_rollout(&sim).unwrap();
    assert_eq!(st.trace, vec![0, 1, 2, 3, 4]);
    assert!(st.stop_issued);
}

#[test]
fn topomap_tracks_visits_frontier_and_inherited_features() {
    let w = corridor();
    let ep = corridor_episode(4);
    let sim = Simulator::with_world(&w, &ep).unwrap();
    let (mut st, obs) = sim.reset();
    let mut map = TopoMap::new(ep.max_steps);
    map.update(&obs).unwrap();
    assert_eq!(map.node_ids(), vec![0, 1]);
    assert_eq!(map.frontier(), vec![1]);
    assert_eq!(map.candidate_mask(), vec![true, false, true]);
    match map.get(1).unwrap().source {
        FeatureSource::Inherited { parent, sector } => {
            assert_eq!(parent, 0);
            assert_eq!(sector, w.sector_towards(0, 1));
        }
        FeatureSource::Panorama => panic!("frontier node has no panorama"),
    }
    let obs = sim.step(&mut st, Action::MoveTo(1)).unwrap().unwrap();
    map.update(&obs).unwrap();
    assert_eq!(map.current(), Some(1));
    assert_eq!(map.get(1).unwrap().status, NodeStatus::Current);
    assert_eq!(map.get(0).unwrap().status, NodeStatus::Visited);
    assert_eq!(map.get(1).unwrap().pose, ZERO_POSE);
    // Node 0 lies 5 m directly behind.
    let back = map.get(0).unwrap().pose;
    assert!((back[0] + 5.0 / POSE_SCALE).abs() < 1e-12 && back[1].abs() < 1e-12);
    assert!((back[4] + 1.0).abs() < 1e-12);
    assert!(map.update(&obs).is_err());
}
