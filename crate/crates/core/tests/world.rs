mod support;

use proptest::prelude::*;
use support::follower::follow;
use support::oracles::bellman_ford;
use toponav::world::*;

fn world(seed: u64) -> WorldGraph {
    WorldGraph::generate(seed, &WorldParams::default()).unwrap()
}

#[test]
fn dijkstra_matches_bellman_ford_on_random_worlds() {
    for seed in 0..50 {
        let w = world(1000 + seed);
        for src in 0..w.node_count() {
            let bf = bellman_ford(&w, src);
            for (dst, &want) in bf.iter().enumerate() {
                let got = w.geodesic(src, dst);
                assert!((got - want).abs() <= 1e-9, "world {seed}: {src}->{dst} {got} vs {want}");
            }
        }
    }
}

#[test]
fn shortest_paths_are_walkable_and_tight() {
    let w = world(7);
    for a in 0..w.node_count() {
        for b in 0..w.node_count() {
            let p = w.shortest_path(a, b).unwrap();
            assert_eq!((p[0], *p.last().unwrap()), (a, b));
            assert!((w.path_length(&p).unwrap() - w.geodesic(a, b)).abs() < 1e-9);
        }
    }
}

#[test]
fn generated_worlds_respect_parameters() {
    let params = WorldParams::default();
    for seed in 0..20 {
        let w = world(seed);
        assert!(w.is_connected());
        assert_eq!(w.node_count(), params.node_count);
        for a in 0..w.node_count() {
            for b in (a + 1)..w.node_count() {
                let d = toponav::geom::distance(w.position(a), w.position(b));
                assert!(d >= params.min_spacing - 1e-9);
            }
            assert!(w.degree(a) >= 1);
            assert!(w.landmark(a) < params.landmark_count);
            let v = w.view_features(a);
            assert_eq!(v.shape(), &[params.view_count, params.view_dim]);
        }
    }
}

#[test]
fn record_round_trip_is_exact() {
    let w = world(3);
    let back = WorldGraph::from_record(w.to_record()).unwrap();
    assert_eq!(back.to_record(), w.to_record());
    assert_eq!(back.view_features(5).data(), w.view_features(5).data());
}

#[test]
fn record_with_disconnected_graph_is_rejected() {
    let mut rec = world(3).to_record();
    rec.edges.retain(|e| e[0] != 0 && e[1] != 0);
    assert!(WorldGraph::from_record(rec).is_err());
}

#[test]
fn expert_solves_every_episode_of_both_styles() {
    let params = EpisodeParams::default();
    for style in [PathStyle::Shortest, PathStyle::Meandering] {
        let mut solved = 0;
        for i in 0..100u64 {
            let w = world(i % 20);
            let ep = sample_episode(&w, i, style, &params).unwrap();
            let sim = toponav::simenv::Simulator::with_world(&w, &ep).unwrap();
            let st = toponav::simenv::expert_rollout(&sim).unwrap();
            assert!(st.stop_issued);
            if w.geodesic(st.current, ep.goal) < ep.success_threshold {
                solved += 1;
            }
        }
        assert_eq!(solved, 100, "{style:?}");
    }
}

#[test]
fn literal_follower_recovers_reference_paths() {
    let params = EpisodeParams::default();
    for i in 0..200u64 {
        let w = world(i % 25);
        let style = if i % 2 == 0 { PathStyle::Shortest } else { PathStyle::Meandering };
        let ep = sample_episode(&w, i, style, &params).unwrap();
        let got = follow(&w, ep.start, ep.start_heading, &ep.instruction.tokens);
        assert_eq!(got.as_deref(), Some(ep.reference_path.as_slice()), "episode {}", ep.id);
    }
}

#[test]
fn annotation_emits_six_variants_per_trajectory() {
    let worlds: WorldSet = (0..5).map(world).collect();
    let eps: Vec<Episode> = (0..20u64)
        .map(|i| sample_episode(worlds.get(i % 5).unwrap(), i, PathStyle::Meandering, &EpisodeParams::default()).unwrap())
        .collect();
    let out = annotate_dataset(&worlds, &eps, 9).unwrap();
    assert_eq!(out.len(), eps.len() * VARIANTS_PER_TRAJECTORY);
    for (chunk, ep) in out.chunks(VARIANTS_PER_TRAJECTORY).zip(&eps) {
        let mut counts: Vec<usize> = chunk.iter().map(|a| a.instruction.segments.len()).collect();
        counts.sort_unstable();
        let want: Vec<usize> = ANNOTATION_SCHEMES.iter().flat_map(|&k| [k, k]).collect();
        assert_eq!(counts, want);
        for a in chunk {
            assert_eq!(a.reference_path, ep.reference_path);
            assert_eq!(a.task_id, TaskId::Augmented);
            let w = worlds.get(a.world_seed).unwrap();
            assert_eq!(follow(w, a.start, a.start_heading, &a.instruction.tokens).as_deref(), Some(a.reference_path.as_slice()));
        }
    }
}

#[test]
fn split_keeps_every_episode_once() {
    let w = world(0);
    let eps: Vec<Episode> = (0..30u64).map(|i| sample_episode(&w, i, PathStyle::Shortest, &EpisodeParams::default()).unwrap()).collect();
    let (a, b) = split_dataset(&eps, 0.1, 4).unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(a.len() + b.len(), 30);
    let mut ids: Vec<&str> = a.iter().chain(&b).map(|e| e.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 30);
    assert_eq!(split_dataset(&eps, 0.1, 4).unwrap().1, b);
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let worlds: WorldSet = (0..3).map(world).collect();
    let eps: Vec<Episode> = (0..6u64)
        .map(|i| sample_episode(worlds.get(i % 3).unwrap(), i, PathStyle::Shortest, &EpisodeParams::default()).unwrap())
        .collect();
    let wp = dir.path().join("worlds.jsonl");
    let ep = dir.path().join("eps.jsonl");
    write_worlds(&wp, &worlds).unwrap();
    write_episodes(&ep, &eps).unwrap();
    assert_eq!(read_episodes(&ep).unwrap(), eps);
    let back = read_worlds(&wp).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.get(1).unwrap().to_record(), worlds.get(1).unwrap().to_record());
    assert!(read_worlds(&ep).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_deterministic(seed in 0u64..10_000) {
        prop_assert_eq!(world(seed).to_record(), world(seed).to_record());
    }

    #[test]
    fn sampled_episodes_respect_bounds(seed in 0u64..10_000, meander in any::<bool>()) {
        let w = world(seed % 40);
        let p = EpisodeParams::default();
        let style = if meander { PathStyle::Meandering } else { PathStyle::Shortest };
        let ep = sample_episode(&w, seed, style, &p).unwrap();
        let d = w.geodesic(ep.start, ep.goal);
        prop_assert!(d >= p.min_len && d <= p.max_len);
        prop_assert!(ep.hops() >= p.min_hops && ep.hops() <= p.max_hops);
        prop_assert!(ep.instruction.tokens.len() <= p.max_tokens);
        prop_assert_eq!(ep.task_id, style.task_id());
        let mut seen = ep.reference_path.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), ep.reference_path.len());
        if meander {
            prop_assert!(w.path_length(&ep.reference_path).unwrap() > d);
        }
    }
}
