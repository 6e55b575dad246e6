mod support;

use numcore::Tensor;
use support::gradcheck::*;
use toponav::policy::*;
use toponav::topomap::TopoMap;
use toponav::vocab::*;
use toponav::world::*;

#[test]
fn sap_cross_entropy_gradient_matches_finite_differences() {
    let err = sap_gradient_error();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grpo_loss_gradient_matches_finite_differences() {
    let err = grpo_gradient_error();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn step_output_shapes() {
    let policy = tiny_policy(1);
    let ep = path_episode();
    let map = start_map();
    let mut s = Session::new(&policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off()).unwrap();
    assert_eq!(s.tape.value(s.text_features()).shape(), &[4, 8]);
    let out = s.step(&map, TaskId::Shortest).unwrap();
    assert_eq!(s.tape.value(out.t_sym).shape(), &[4, 8]);
    assert_eq!(s.tape.value(out.g_out).shape(), &[3, 16]);
    assert_eq!(s.tape.value(out.logits).shape(), &[1, 3]);
    assert_eq!(out.mask, vec![true, false, true]);
    let mlm = s.mlm_logits(out.t_sym, &[1, 3]).unwrap();
    assert_eq!(s.tape.value(mlm).shape(), &[2, DEFAULT_VOCAB_SIZE]);
    assert!(s.mlm_logits(out.t_sym, &[4]).is_err());
}

#[test]
fn invalid_instructions_are_rejected() {
    let policy = tiny_policy(1);
    assert!(Session::new(&policy, &[], TaskId::Shortest, DropoutCtx::off()).is_err());
    assert!(Session::new(&policy, &[DEFAULT_VOCAB_SIZE], TaskId::Shortest, DropoutCtx::off()).is_err());
    let long = vec![FORWARD; policy.config().max_text_len + 1];
    assert!(Session::new(&policy, &long, TaskId::Shortest, DropoutCtx::off()).is_err());
}

#[test]
fn task_embedding_changes_text_features() {
    let policy = tiny_policy(1);
    let tokens = path_episode().instruction.tokens;
    let a = Session::new(&policy, &tokens, TaskId::Shortest, DropoutCtx::off()).unwrap();
    let b = Session::new(&policy, &tokens, TaskId::Augmented, DropoutCtx::off()).unwrap();
    assert_ne!(a.tape.value(a.text_features()).data(), b.tape.value(b.text_features()).data());
    let c = Session::new(&policy, &tokens, TaskId::Shortest, DropoutCtx::off()).unwrap();
    assert_eq!(a.tape.value(a.text_features()).data(), c.tape.value(c.text_features()).data());
}

#[test]
fn masked_logits_hide_non_candidates() {
    let policy = tiny_policy(2);
    let ep = path_episode();
    let mut s = Session::new(&policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off()).unwrap();
    let out = s.step(&start_map(), TaskId::Shortest).unwrap();
    let l = out.masked_logits(&s.tape);
    assert!(l[0].is_finite() && l[2].is_finite());
    assert_eq!(l[1], f64::NEG_INFINITY);
}

#[test]
fn zeroed_score_head_gives_uniform_choice() {
    let mut policy = tiny_policy(2);
    let ids: Vec<_> = policy.store().ids().filter(|&id| policy.store().name(id).starts_with("sap.down")).collect();
    assert_eq!(ids.len(), 2);
    for id in ids {
        for x in policy.store_mut().get_mut(id).data_mut() {
            *x = 0.0;
        }
    }
    let ep = path_episode();
    let mut s = Session::new(&policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off()).unwrap();
    let out = s.step(&start_map(), TaskId::Shortest).unwrap();
    let lp = log_softmax(&out.masked_logits(&s.tape), 1.0).unwrap();
    assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12 && (lp[2] - 0.5f64.ln()).abs() < 1e-12);
    assert_eq!(lp[1], f64::NEG_INFINITY);
}

#[test]
fn mlm_loss_gradient_reaches_only_masked_rows() {
    let policy = tiny_policy(2);
    let ep = path_episode();
    let mut s = Session::new(&policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off()).unwrap();
    let rows = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let x = s.tape.leaf(rows, true).unwrap();
    let logits = s.mlm_logits(x, &[1, 3]).unwrap();
    let loss = s.tape.cross_entropy(logits, &[landmark_token(1), STOP_AT], None).unwrap();
    let mut grads = numcore::Gradients::for_store(policy.store());
    s.tape.backward(loss, &mut grads).unwrap();
    let g = s.tape.grad(x).unwrap();
    for r in 0..4 {
        let norm: f64 = g.data()[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
        assert_eq!(norm > 0.0, r == 1 || r == 3, "row {r}");
    }
}

#[test]
fn single_token_attention_ignores_queries_and_keys() {
    // With one text token and a one-node map, every attention distribution is
    // a point mass, so query/key projections cannot influence the output.
    let w = path_world();
    let ep = path_episode();
    let sim = toponav::simenv::Simulator::with_world(&w, &ep).unwrap();
    let (_, obs) = sim.reset();
    let mut map = TopoMap::new(6);
    map.update(&obs).unwrap();
    let run = |p: &Policy| {
        let mut s = Session::new(p, &[FORWARD], TaskId::Shortest, DropoutCtx::off()).unwrap();
        let t = s.text_features();
        let g = s.graph_tokens(&map, TaskId::Shortest).unwrap();
        let one = s.tape.select_rows(g, &[0]).unwrap();
        let (ts, go) = s.fuse(t, one).unwrap();
        (s.tape.value(ts).data().to_vec(), s.tape.value(go).data().to_vec())
    };
    let mut policy = tiny_policy(4);
    let before = run(&policy);
    let qk: Vec<_> = policy
        .store()
        .ids()
        .filter(|&id| {
            let n = policy.store().name(id);
            n.starts_with("fusion.") && (n.contains(".q.") || n.contains(".k."))
        })
        .collect();
    assert!(!qk.is_empty());
    for id in qk {
        for x in policy.store_mut().get_mut(id).data_mut() {
            *x += 0.75;
        }
    }
    let after = run(&policy);
    for (a, b) in before.0.iter().zip(&after.0).chain(before.1.iter().zip(&after.1)) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// The same corridor with node ids 1 and 2 swapped.
fn relabelled(swap: bool) -> (WorldGraph, Episode) {
    let params = WorldParams { node_count: 4, degree: 2, landmark_count: 4, ..WorldParams::default() };
    let (p1, p2) = ([5.0, 0.0], [0.0, 5.0]);
    let positions = if swap { vec![[0.0, 0.0], p2, p1, [10.0, 0.0]] } else { vec![[0.0, 0.0], p1, p2, [10.0, 0.0]] };
    let (a, b) = if swap { (2, 1) } else { (1, 2) };
    let landmarks = if swap { vec![0, 2, 1, 3] } else { vec![0, 1, 2, 3] };
    let w = WorldGraph::from_record(WorldRecord {
        seed: 0,
        params,
        positions,
        edges: vec![[0, a], [0, b], [a, 3]],
        landmarks,
    })
    .unwrap();
    let mut ep = path_episode();
    ep.goal = 3;
    ep.reference_path = vec![0, a, 3];
    (w, ep)
}

#[test]
fn scores_follow_node_relabelling() {
    let policy = tiny_policy(6);
    let scores = |swap: bool| {
        let (w, ep) = relabelled(swap);
        let sim = toponav::simenv::Simulator::with_world(&w, &ep).unwrap();
        let (_, obs) = sim.reset();
        let mut map = TopoMap::new(6);
        map.update(&obs).unwrap();
        let mut s = Session::new(&policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off()).unwrap();
        let out = s.step(&map, TaskId::Shortest).unwrap();
        s.tape.value(out.logits).data().to_vec()
    };
    let a = scores(false);
    let b = scores(true);
    // Tokens: STOP, node 0, node 1, node 2.
    let permuted = [b[0], b[1], b[3], b[2]];
    for (x, y) in a.iter().zip(permuted) {
        assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
    }
}

#[test]
fn dropout_is_seeded_and_switchable() {
    let mut cfg = tiny_policy(1).config().clone();
    cfg.dropout = 0.5;
    let policy = Policy::new(cfg, 1).unwrap();
    let tokens = path_episode().instruction.tokens;
    let feats = |drop: DropoutCtx| {
        let s = Session::new(&policy, &tokens, TaskId::Shortest, drop).unwrap();
        s.tape.value(s.text_features()).data().to_vec()
    };
    let on = || DropoutCtx::new(0.5, 7).with_groups(&[Group::Text], true);
    assert_eq!(feats(on()), feats(on()));
    assert_ne!(feats(on()), feats(DropoutCtx::off()));
    assert_eq!(feats(DropoutCtx::new(0.5, 7).with_groups(&[Group::Fusion], true)), feats(DropoutCtx::off()));
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let policy = tiny_policy(9);
    let bytes = policy.to_checkpoint_bytes();
    let back = Policy::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.config(), policy.config());
    assert!(back.store().bit_equal(policy.store()));
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0xff;
    assert!(Policy::from_checkpoint_bytes(&bad).is_err() || !Policy::from_checkpoint_bytes(&bad).unwrap().store().bit_equal(policy.store()));
    assert!(Policy::from_checkpoint_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn parameter_groups_cover_the_network() {
    let mut policy = tiny_policy(1);
    let total: usize = Group::ALL.iter().map(|&g| policy.params_in(g).len()).sum();
    assert_eq!(total, policy.store().len());
    policy.freeze_groups(&[Group::Text, Group::Node]);
    assert_eq!(policy.frozen_groups(), vec![Group::Text, Group::Node]);
}
