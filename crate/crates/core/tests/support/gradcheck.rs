//! Whole-network finite-difference checks on a three-node path world.

use numcore::{max_relative_error, Gradients};
use toponav::policy::{DropoutCtx, Policy, PolicyConfig, Session};
use toponav::seeding::rng_for;
use toponav::topomap::TopoMap;
use toponav::trainer::*;
use toponav::vocab::*;
use toponav::world::*;

pub const EPS: f64 = 1e-5;
/// Denominator floor for coordinates whose derivative is essentially zero.
pub const FLOOR: f64 = 1e-6;

/// Nodes 0-1-2 on a line, 5 m apart.
pub fn path_world() -> WorldGraph {
    let params = WorldParams { node_count: 3, degree: 2, landmark_count: 3, ..WorldParams::default() };
    WorldGraph::from_record(WorldRecord {
        seed: 0,
        params,
        positions: vec![[0.0, 0.0], [5.0, 0.0], [10.0, 0.0]],
        edges: vec![[0, 1], [1, 2]],
        landmarks: vec![0, 1, 2],
    })
    .unwrap()
}

/// Four-token instruction "forward, landmark 1, forward, stop" from node 0 to node 2.
pub fn path_episode() -> Episode {
    Episode {
        id: "path".into(),
        world_seed: 0,
        style: PathStyle::Shortest,
        start: 0,
        start_heading: 0.0,
        goal: 2,
        reference_path: vec![0, 1, 2],
        instruction: Instruction {
            tokens: vec![FORWARD, landmark_token(1), FORWARD, STOP_AT],
            task_id: 1,
            segments: vec![[0, 2]],
        },
        task_id: TaskId::Shortest,
        success_threshold: 3.0,
        max_steps: 6,
    }
}

pub fn tiny_policy(seed: u64) -> Policy {
    let cfg = PolicyConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        text_layers: 1,
        pano_layers: 1,
        fusion_layers: 2,
        dropout: 0.0,
        ..PolicyConfig::default()
    };
    Policy::new(cfg, seed).unwrap()
}

/// The start-state map: STOP, node 0 (current) and node 1 (frontier).
pub fn start_map() -> TopoMap {
    let w = path_world();
    let ep = path_episode();
    let sim = toponav::simenv::Simulator::with_world(&w, &ep).unwrap();
    let (_, obs) = sim.reset();
    let mut map = TopoMap::new(ep.max_steps);
    map.update(&obs).unwrap();
    map
}

fn sap_loss(policy: &Policy, grads: Option<&mut Gradients>) -> f64 {
    let ep = path_episode();
    let map = start_map();
    let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off()).unwrap();
    let out = s.step(&map, TaskId::Shortest).unwrap();
    let l = s.tape.cross_entropy(out.logits, &[2], Some(&out.mask)).unwrap();
    let v = s.tape.value(l).item().unwrap();
    if let Some(g) = grads {
        s.tape.backward(l, g).unwrap();
    }
    v
}

/// Worst relative error over every parameter coordinate of `loss`.
fn check(mut policy: Policy, mut loss: impl FnMut(&Policy, Option<&mut Gradients>) -> f64) -> f64 {
    let mut grads = Gradients::for_store(policy.store());
    loss(&policy, Some(&mut grads));
    let ids: Vec<_> = policy.store().ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = policy.store().get(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = policy.store().get(id).data()[i];
            policy.store_mut().get_mut(id).data_mut()[i] = orig + EPS;
            let hi = loss(&policy, None);
            policy.store_mut().get_mut(id).data_mut()[i] = orig - EPS;
            let lo = loss(&policy, None);
            policy.store_mut().get_mut(id).data_mut()[i] = orig;
            *slot = (hi - lo) / (2.0 * EPS);
        }
        worst = worst.max(max_relative_error(grads.get(id).data(), &numeric, FLOOR));
    }
    worst
}

pub fn sap_gradient_error() -> f64 {
    let policy = tiny_policy(3);
    assert_eq!(start_map().candidate_mask().len(), 3);
    check(policy, sap_loss)
}

/// Full GRPO loss (clipped surrogate and k3 penalty) over one sampled group.
/// Old and reference log-probabilities are shifted so that some ratios fall
/// outside the clip range and the KL term is non-zero.
pub fn grpo_gradient_error() -> f64 {
    let w = path_world();
    let ep = path_episode();
    let policy = tiny_policy(5);
    let params = GrpoParams { group_size: 3, kl_beta: 0.3, ..GrpoParams::default() };
    let mut group = grpo_sample_group(&policy, &w, &ep, &params, &mut rng_for(2, &[])).unwrap();
    let shifts = [0.05, -0.6, 0.45, -0.1, 0.7, -0.03];
    let mut k = 0;
    for r in &mut group.rollouts {
        for st in &mut r.steps {
            st.logp += shifts[k % shifts.len()];
            k += 1;
        }
    }
    group.advantages = vec![1.3, -0.4, -0.9];
    let refs: Vec<Vec<f64>> = reference_logps(&policy, &group)
        .unwrap()
        .into_iter()
        .map(|r| r.into_iter().enumerate().map(|(i, l)| l - 0.2 + 0.1 * i as f64).collect())
        .collect();
    let groups = vec![group];
    let refs = vec![refs];
    check(policy, |p, g| {
        let mut scratch;
        let target = match g {
            Some(g) => g,
            None => {
                scratch = Gradients::for_store(p.store());
                &mut scratch
            }
        };
        grpo_pass(p, &groups, &refs, &params, 0, target, |_| {}).unwrap().loss
    })
}
