use numcore::{
    finite_difference_gradient, max_relative_error, Adam, AdamConfig, Gradients, NumError, ParamStore, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Scalarizes an op output with fixed random weights so every output
/// coordinate contributes a distinct term to the loss.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &shape);
    let wv = tape.constant(w).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> numcore::Result<Var>;

/// Max relative error between tape gradients and central differences over all inputs.
fn grad_check(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = weighted_sum(&mut tape, out, 99);
    let store = ParamStore::new();
    let mut grads = Gradients::for_store(&store);
    tape.backward(loss, &mut grads).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_difference_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }).unwrap())
                    .collect();
                let o = build(&mut t, &vs)?;
                let l = weighted_sum(&mut t, o, 99);
                t.value(l).item()
            },
            x,
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(analytic.data(), numeric.data(), 1e-6));
    }
    worst
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2)).unwrap();
    let ii = tape.matmul(i, i).unwrap();
    assert_eq!(tape.value(ii), &Tensor::identity(2));

    let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = tape.constant(mat(2, 1, &[0.0, 1.0])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    assert_eq!(tape.value(c).shape(), &[2, 1]);

    let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(x, x), Err(NumError::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(vec![0.0; 3])).unwrap();
    let p = tape.softmax(z, None).unwrap();
    for v in tape.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
    let p = tape.softmax(big, None).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let p = tape.softmax(x, Some(&[false, true])).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0, 1.0]);

    assert!(matches!(
        tape.softmax(x, Some(&[false, false])),
        Err(NumError::Degenerate { .. })
    ));
}

#[test]
fn constituent_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let row = tape.reshape(z, vec![1, 2]).unwrap();
    let ce = tape.cross_entropy(row, &[0], None).unwrap();
    assert!((tape.value(ce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(
        tape.cross_entropy(row, &[2], None),
        Err(NumError::Index { .. })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.constant(mat(1, 3, &[1.0, -2.0, 3.0])).unwrap();
    let same = tape.dropout(x, 0.0, &mut rng, true).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    assert!(matches!(tape.dropout(x, 1.0, &mut rng, true), Err(NumError::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, &mut rng, true), Err(NumError::Config(_))));

    let c = tape.constant(mat(1, 3, &[2.0, 2.0, 2.0])).unwrap();
    let gain = tape.constant(Tensor::vector(vec![5.0, 6.0, 7.0])).unwrap();
    let bias = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
    let ln = tape.layer_norm(c, gain, bias).unwrap();
    assert_eq!(tape.value(ln).data(), &[0.1, 0.2, 0.3]);

    let ids = tape.constant(mat(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
    assert!(matches!(tape.embedding(ids, &[3]), Err(NumError::Index { .. })));
}

#[test]
fn dropout_scales_survivors() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = tape.constant(Tensor::filled(&[1, 1000], 1.0)).unwrap();
    let y = tape.dropout(x, 0.25, &mut rng, true).unwrap();
    let vals = tape.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    let dropped = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((150..350).contains(&dropped), "{dropped}");
    let off = tape.dropout(x, 0.25, &mut rng, false).unwrap();
    assert_eq!(off, x);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.3, -1.0, 2.0]));
    let mut grads = Gradients::for_store(&store);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w).unwrap();
    let loss = tape.sum(wv).unwrap();
    tape.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[1.0, 1.0, 1.0]);
    tape.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[2.0, 2.0, 2.0]);
    assert!(matches!(tape.backward(wv, &mut grads), Err(NumError::Contract(_))));

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    let mut grads = Gradients::for_store(&store);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w).unwrap();
    let sq = tape.mul(wv, wv).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    store.set_frozen(w, true);
    let mut grads = Gradients::for_store(&store);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w).unwrap();
    let loss = tape.sum(wv).unwrap();
    tape.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[0.0, 0.0]);
}

#[test]
fn tape_rejects_second_store() {
    let mut a = ParamStore::new();
    let ia = a.add("x", Tensor::scalar(1.0));
    let b = a.clone();
    let mut tape = Tape::new();
    tape.param(&a, ia).unwrap();
    assert!(tape.param(&b, ia).is_err());
    tape.clear();
    assert!(tape.param(&b, ia).is_ok());
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
    let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
    for v in g.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &Tensor::scalar(3.0), 1e-5).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
    assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
}

fn two_layer_loss(tape: &mut Tape, store: &ParamStore, ids: &[numcore::ParamId; 4], x: &Tensor) -> numcore::Result<Var> {
    let xv = tape.constant(x.clone())?;
    let w1 = tape.param(store, ids[0])?;
    let b1 = tape.param(store, ids[1])?;
    let w2 = tape.param(store, ids[2])?;
    let b2 = tape.param(store, ids[3])?;
    let h = tape.linear(xv, w1, Some(b1))?;
    let h = tape.gelu(h)?;
    let o = tape.linear(h, w2, Some(b2))?;
    tape.cross_entropy(o, &[1, 0, 2], None)
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let ids = [
        store.add("w1", random(&mut rng, &[4, 5])),
        store.add("b1", random(&mut rng, &[5])),
        store.add("w2", random(&mut rng, &[5, 3])),
        store.add("b2", random(&mut rng, &[3])),
    ];
    let x = random(&mut rng, &[3, 4]);
    let mut grads = Gradients::for_store(&store);
    let mut tape = Tape::new();
    let loss = two_layer_loss(&mut tape, &store, &ids, &x).unwrap();
    tape.backward(loss, &mut grads).unwrap();

    for &id in &ids {
        let base = store.get(id).clone();
        let numeric = finite_difference_gradient(
            |probe| {
                let mut s = store.clone();
                s.set(id, probe.clone())?;
                let mut t = Tape::new();
                let l = two_layer_loss(&mut t, &s, &ids, &x)?;
                t.value(l).item()
            },
            &base,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(grads.get(id).data(), numeric.data(), 1e-6);
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
    let before = store.get(w).clone();
    let mut grads = Gradients::for_store(&store);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.step(&mut store, &mut grads).unwrap();
    assert_eq!(store.get(w), &before);

    let lr = 0.01;
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &store);
    grads = Gradients::for_store(&store);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w).unwrap();
    let c = tape.constant(Tensor::vector(vec![3.0, -0.2, 1e-3])).unwrap();
    let p = tape.mul(wv, c).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss, &mut grads).unwrap();
    adam.step(&mut store, &mut grads).unwrap();
    let signs = [1.0, -1.0, 1.0];
    for i in 0..3 {
        let delta = store.get(w).data()[i] - before.data()[i];
        assert!((delta + lr * signs[i]).abs() < 1e-6 * lr.max(1.0), "{i}: {delta}");
    }
    assert!(grads.get(w).data().iter().all(|&g| g == 0.0));

    let mut zero_lr = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &store);
    let snapshot = store.clone();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w).unwrap();
    let loss = tape.sum(wv).unwrap();
    tape.backward(loss, &mut grads).unwrap();
    zero_lr.step(&mut store, &mut grads).unwrap();
    assert!(store.bit_equal(&snapshot));

    let mut other = ParamStore::new();
    other.add("a", Tensor::scalar(0.0));
    other.add("b", Tensor::scalar(0.0));
    let mut bad = Gradients::for_store(&other);
    assert!(matches!(zero_lr.step(&mut store, &mut bad), Err(NumError::Contract(_))));
}

#[test]
fn checkpoint_rejects_corruption() {
    let t = Tensor::vector(vec![1.0, 2.0]);
    let mut bytes = numcore::encode_checkpoint([("a", &t)]);
    assert_eq!(numcore::decode_checkpoint(&bytes).unwrap()[0].1, t);
    bytes[0] = b'X';
    assert!(numcore::decode_checkpoint(&bytes).is_err());
    let bytes = numcore::encode_checkpoint([("a", &t)]);
    assert!(numcore::decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let t = mat(2, 2, &[f64::MIN_POSITIVE, -0.0, 1e300, -3.25]);
    numcore::save_checkpoint(&path, [("w", &t)]).unwrap();
    let back = numcore::load_checkpoint(&path).unwrap();
    assert_eq!(back[0].0, "w");
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back[0].1), bits(&t));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_and_structural_ops_match_fd(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        let w = random(&mut rng, &[4, 2]);
        let cases: Vec<(Vec<Tensor>, Box<Build>)> = vec![
            (vec![a.clone(), w.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
            (vec![a.clone(), w.clone(), Tensor::vector(vec![0.3, -0.7])], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
            (vec![a.clone(), b.clone()], Box::new(|t, v| { let s = t.add(v[0], v[1])?; t.mul(s, v[1]) })),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
            (vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
            (vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
            (vec![a.clone()], Box::new(|t, v| { let s = t.scale(v[0], 0.5)?; t.exp(s) })),
            (vec![a.clone(), row.clone(), random(&mut rng, &[4])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]))),
            (vec![a.clone()], Box::new(|t, v| t.softmax(v[0], None))),
            (vec![a.clone()], Box::new(|t, v| t.softmax(v[0], Some(&[true, false, true, true, false, true, true, true, true, true, true, false])))),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_cols(v[0], v[1]))),
            (vec![a.clone(), row.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
            (vec![a.clone()], Box::new(|t, v| t.select_rows(v[0], &[2, 0, 2]))),
            (vec![a.clone()], Box::new(|t, v| t.mean_rows(v[0]))),
            (vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
            (vec![a.clone()], Box::new(|t, v| t.embedding(v[0], &[1, 1, 0, 2]))),
            (vec![a.clone()], Box::new(|t, v| t.cross_entropy(v[0], &[3, 0, 1], None))),
            (vec![a.clone()], Box::new(|t, v| t.cross_entropy(v[0], &[3, 0, 1], Some(&[true, false, true, true, true, true, false, true, false, true, true, true])))),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.minimum(v[0], v[1]))),
            (vec![a.clone()], Box::new(|t, v| t.clamp(v[0], -0.8, 0.9))),
        ];
        for (i, (inputs, build)) in cases.iter().enumerate() {
            let err = grad_check(inputs, build.as_ref());
            prop_assert!(err < 1e-4, "case {i}: rel err {err}");
        }
    }

    #[test]
    fn attention_matches_fd(seed in 0u64..10_000, n in 1usize..4, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, &[n, 4]);
        let k = random(&mut rng, &[m, 4]);
        let v = random(&mut rng, &[m, 4]);
        for heads in [1, 2] {
            let err = grad_check(&[q.clone(), k.clone(), v.clone()], &move |t: &mut Tape, x: &[Var]| t.attention(x[0], x[1], x[2], heads));
            prop_assert!(err < 1e-4, "heads {heads}: {err}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[4, 6]);
        let mask: Vec<bool> = (0..24).map(|i| i % 6 == 0 || rng.random::<f64>() < 0.6).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let xs = tape.scale(xv, scale).unwrap();
        let p = tape.softmax(xs, Some(&mask)).unwrap();
        let out = tape.value(p);
        for i in 0..4 {
            let s: f64 = out.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                prop_assert_eq!(out.data()[j], 0.0);
            }
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut rng, &[3, 3]));
        let x = random(&mut rng, &[2, 3]);
        let run = |which: u8| {
            let mut grads = Gradients::for_store(&store);
            let mut tape = Tape::new();
            let wv = tape.param(&store, w).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let h = tape.matmul(xv, wv).unwrap();
            let f = { let g = tape.gelu(h).unwrap(); tape.sum(g).unwrap() };
            let g = tape.cross_entropy(h, &[0, 2], None).unwrap();
            let loss = match which {
                0 => f,
                1 => g,
                _ => {
                    let a = tape.scale(f, ca).unwrap();
                    let b = tape.scale(g, cb).unwrap();
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(loss, &mut grads).unwrap();
            grads.get(w).clone()
        };
        let (gf, gg, gc) = (run(0), run(1), run(2));
        for i in 0..9 {
            let expect = ca * gf.data()[i] + cb * gg.data()[i];
            prop_assert!((gc.data()[i] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn dropout_replays_bit_identically(seed in any::<u64>()) {
        let x = Tensor::filled(&[4, 8], 1.5);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let d = tape.dropout(xv, 0.3, &mut rng, true).unwrap();
            tape.value(d).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 0..40), name in "[a-z._0-9]{1,24}") {
        let t = Tensor::vector(values);
        let bytes = numcore::encode_checkpoint([(name.as_str(), &t)]);
        let back = numcore::decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back[0].0, &name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back[0].1), bits(&t));
        prop_assert_eq!(back[0].1.shape(), t.shape());
    }
}
