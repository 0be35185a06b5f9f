use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central-difference check (Richardson-extrapolated) of `f` w.r.t. every entry of every input.
/// Returns the worst relative error.
fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let x = t.data()[i];
            let h = 1e-4 * (1.0 + x.abs());
            let central = |h: f64| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] = x + h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] = x - h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            };
            // Richardson extrapolation cancels the O(h^2) truncation term.
            let numeric = (4.0 * central(0.5 * h) - central(h)) / 3.0;
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn scatter_sum_counts_duplicates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3, 2], 1.0));
    let y = tape.scatter_sum(x, &[0, 0, 1], 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn scatter_sum_rejects_out_of_range() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 1], 1.0));
    let err = tape.scatter_sum(x, &[0, 5], 2).unwrap_err();
    assert!(matches!(err, AdError::Index { op: "scatter_sum", index: 5, len: 2 }));
}

#[test]
fn gather_rejects_out_of_range() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 1], 1.0));
    assert!(tape.gather(x, &[2]).is_err());
}

#[test]
fn affine_reports_shapes() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4, 3]));
    let w = tape.leaf(Tensor::zeros(&[2, 5]));
    let msg = tape.affine(x, w, None).unwrap_err().to_string();
    assert!(msg.contains("affine") && msg.contains("[4, 3]") && msg.contains("[2, 5]"), "{msg}");
}

#[test]
fn cond_layer_norm_identity_on_normalized_rows() {
    // Rows whose biased variance plus the norm epsilon is exactly one.
    let s = (1.0 - LAYER_NORM_EPS).sqrt();
    let rows = [[s, -s, s, -s], [-s, s, s, -s]];
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 4, data.clone()).unwrap());
    let g = tape.leaf(Tensor::full(&[4], 1.0));
    let b = tape.leaf(Tensor::zeros(&[4]));
    let y = tape.cond_layer_norm(x, g, b).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        randn(&mut rng, &[5, 3]),
        randn(&mut rng, &[3, 4]),
        randn(&mut rng, &[4]),
        randn(&mut rng, &[5, 4]),
    ];
    let worst = fd_check(&inputs, |t, v| {
        let s = t.silu(v[0]);
        let a = t.affine(s, v[1], Some(v[2])).unwrap();
        t.mse(a, v[3], 1.7).unwrap()
    });
    assert!(worst < 1e-5, "worst rel err {worst}");
}

#[test]
fn every_primitive_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        randn(&mut rng, &[4, 3]),
        randn(&mut rng, &[6, 2]),
        randn(&mut rng, &[5, 5]),
        randn(&mut rng, &[1, 5]),
        randn(&mut rng, &[5]),
        randn(&mut rng, &[4, 5]),
    ];
    let src = [0usize, 1, 1, 3, 2, 0];
    let worst = fd_check(&inputs, |t, v| {
        let e = t.gather(v[0], &src).unwrap();
        let c = t.concat(&[e, v[1]]).unwrap();
        let a = t.affine(c, v[2], None).unwrap();
        let s = t.silu(a);
        let agg = t.scatter_sum(s, &src, 4).unwrap();
        let n = t.cond_layer_norm(agg, v[3], v[4]).unwrap();
        let r = t.scale(n, 0.3);
        let sum = t.add(r, v[5]).unwrap();
        let z = t.leaf(Tensor::zeros(&[4, 5]));
        let m = t.mse(sum, z, 0.5).unwrap();
        let tot = t.sum(s);
        let tot = t.scale(tot, 0.01);
        t.add(m, tot).unwrap()
    });
    assert!(worst < 1e-5, "worst rel err {worst}");
}

#[test]
fn linear_loss_gradient_is_outer_product() {
    let mut store = ParamStore::new();
    let wid = store.insert("w", Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
    let w = tape.param(wid);
    let y = tape.affine(x, w, None).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let mut store2 = store.clone();
    store2.accumulate(&grads);
    assert_eq!(store2.grad(wid).data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.insert("used", Tensor::full(&[2, 2], 0.5)).unwrap();
    let unused = store.insert("unused", Tensor::full(&[2], 1.0)).unwrap();
    let grads = {
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(Tensor::full(&[1, 2], 1.0));
        let w = tape.param(used);
        let _p = tape.param(unused);
        let y = tape.affine(x, w, None).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap()
    };
    store.accumulate(&grads);
    assert!(store.grad(unused).data().iter().all(|&g| g == 0.0));
    assert!(store.grad(used).data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]));
    let y = tape.silu(x);
    assert!(matches!(tape.backward(y), Err(AdError::NonScalarLoss(_))));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[7, 4]);
    let w = randn(&mut rng, &[4, 4]);
    let run = || {
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let b = t.leaf(w.clone());
        let y = t.affine(a, b, None).unwrap();
        let y = t.scatter_sum(y, &[0, 1, 0, 2, 1, 0, 2], 3).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn adamw_zero_gradient_without_decay_is_noop() {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let before = store.value(id).clone();
    let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
    opt.step(&mut store, 1e-3).unwrap();
    assert_eq!(store.value(id), &before);
}

#[test]
fn adamw_single_step_matches_hand_computation() {
    let (theta, g, lr, wd) = (0.7, 0.3, 1e-2, 1e-2);
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::scalar(theta)).unwrap();
    let mut tape = Tape::with_params(&store);
    let p = tape.param(id);
    let p = tape.scale(p, g);
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    store.accumulate(&grads);
    AdamW { weight_decay: wd, ..AdamW::default() }.step(&mut store, lr).unwrap();

    // After one step the bias-corrected moments are g and g^2 exactly.
    let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
    let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
    let want = theta - lr * m_hat / (v_hat.sqrt() + 1e-8) - lr * wd * theta;
    assert!((store.value(id).item() - want).abs() < 1e-15);
}

#[test]
fn adamw_clips_global_norm() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Tensor::scalar(0.0)).unwrap();
    let b = store.insert("b", Tensor::scalar(0.0)).unwrap();
    let mut tape = Tape::with_params(&store);
    let (pa, pb) = (tape.param(a), tape.param(b));
    let (sa, sb) = (tape.scale(pa, 30.0), tape.scale(pb, 40.0));
    let s = tape.add(sa, sb).unwrap();
    let loss = tape.sum(s);
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    store.accumulate(&grads);
    let stats = AdamW::default().step(&mut store, 1e-3).unwrap();
    assert!((stats.grad_norm - 50.0).abs() < 1e-12);
    assert!((stats.clip_scale - 0.1).abs() < 1e-15);
}

#[test]
fn adamw_aborts_on_nan_and_names_parameter() {
    let mut store = ParamStore::new();
    let id = store.insert("bad.w", Tensor::scalar(1.0)).unwrap();
    let mut tape = Tape::with_params(&store);
    let p = tape.param(id);
    let p = tape.scale(p, f64::NAN);
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    store.accumulate(&grads);
    let err = AdamW::default().step(&mut store, 1e-3).unwrap_err();
    assert!(err.to_string().contains("bad.w"));
    assert_eq!(store.value(id).item(), 1.0);
    assert_eq!(store.step_count(), 0);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
    assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_preserves_values_and_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let a = store.insert("enc.w", randn(&mut rng, &[3, 4])).unwrap();
    store.insert("enc.b", randn(&mut rng, &[4])).unwrap();
    let mut tape = Tape::with_params(&store);
    let p = tape.param(a);
    let s = tape.silu(p);
    let loss = tape.sum(s);
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    store.accumulate(&grads);
    AdamW::default().step(&mut store, 1e-3).unwrap();

    let mut buf = Vec::new();
    write_checkpoint(&store, &mut buf).unwrap();
    assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back.step_count(), 1);
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn checkpoint_rejects_bad_magic() {
    let err = read_checkpoint(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).unwrap_err();
    assert!(matches!(err, AdError::Checkpoint(_)));
}

proptest! {
    #[test]
    fn scatter_sum_is_permutation_invariant(
        (rows, idx, perm_seed) in (1usize..40).prop_flat_map(|n| (
            proptest::collection::vec(-10.0f64..10.0, n * 3),
            proptest::collection::vec(0usize..6, n),
            any::<u64>(),
        ))
    ) {
        let n = idx.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled_rows: Vec<f64> = order.iter().flat_map(|&e| rows[e * 3..e * 3 + 3].to_vec()).collect();
        let shuffled_idx: Vec<usize> = order.iter().map(|&e| idx[e]).collect();

        let run = |data: Vec<f64>, idx: &[usize]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::matrix(n, 3, data).unwrap());
            let y = t.scatter_sum(x, idx, 6).unwrap();
            t.value(y).clone()
        };
        let a = run(rows.clone(), &idx);
        let b = run(shuffled_rows, &shuffled_idx);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_mlp_gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..5, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            randn(&mut rng, &[n, d]),
            randn(&mut rng, &[d, 8]),
            randn(&mut rng, &[8]),
            randn(&mut rng, &[8]),
            randn(&mut rng, &[n, 8]),
        ];
        let worst = fd_check(&inputs, |t, v| {
            let a = t.affine(v[0], v[1], Some(v[2])).unwrap();
            let s = t.silu(a);
            let g = t.add(v[3], v[3]).unwrap();
            let ln = t.cond_layer_norm(s, g, v[2]).unwrap();
            t.mse(ln, v[4], 2.0).unwrap()
        });
        prop_assert!(worst < 1e-5, "worst rel err {}", worst);
    }
}


#[test]
fn gather_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[5, 4]), randn(&mut rng, &[6, 4])];
    let (ia, ib) = ([0usize, 2, 2, 1, 0, 2], [4usize, 4, 0, 3, 1, 2]);
    let worst = fd_check(&inputs, |t, v| {
        let s = t.gather_sum(&[(v[0], Some(&ia[..])), (v[1], Some(&ib[..])), (v[2], None)]).unwrap();
        let s = t.silu(s);
        let z = t.leaf(Tensor::full(&[6, 4], 0.3));
        t.mse(s, z, 1.0).unwrap()
    });
    assert!(worst < 1e-5, "worst rel err {worst}");
}

#[test]
fn gather_sum_equals_gathers_plus_adds() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (a, b) = (randn(&mut rng, &[3, 2]), randn(&mut rng, &[4, 2]));
    let idx = [2usize, 0, 0, 1];
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(a), t.leaf(b));
    let fused = t.gather_sum(&[(va, Some(&idx[..])), (vb, None)]).unwrap();
    let ga = t.gather(va, &idx).unwrap();
    let plain = t.add(ga, vb).unwrap();
    assert_eq!(t.value(fused).data(), t.value(plain).data());
    assert!(t.gather_sum(&[(va, Some(&[5][..]))]).is_err());
    assert!(t.gather_sum(&[(va, None), (vb, None)]).is_err());
}
