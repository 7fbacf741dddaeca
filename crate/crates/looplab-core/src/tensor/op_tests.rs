use super::gradcheck::finite_diff_check;
use super::{cross_entropy_value, Graph, Tensor, TensorError, Var};
use crate::rng;

fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut r = rng::stream(seed);
    let n = shape.iter().product();
    Tensor::new(shape, rng::normal_vec(&mut r, n, 1.0)).unwrap()
}

#[test]
fn matmul_identity_case() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_product() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[11.0]);
}

#[test]
fn matmul_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = randn(vec![5, 7], 1).with_grad();
    let b = randn(vec![7, 3], 2).with_grad();
    let err = finite_diff_check(
        |g, vars| {
            let y = g.matmul(vars[0], vars[1])?;
            // A non-linear reduction so the gradient is input-dependent.
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn rms_norm_constant_vector_gives_unit_scale() {
    for c in [2.5, -0.7] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![c; 6]).unwrap());
        let gain = g.constant(Tensor::ones(vec![6]));
        let y = g.rms_norm(x, gain, 0.0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - c.signum()).abs() < 1e-12, "{v} vs sign({c})");
        }
    }
}

#[test]
fn rms_norm_zero_vector_stays_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 8]).unwrap());
    let gain = g.constant(Tensor::ones(vec![8]));
    let y = g.rms_norm(x, gain, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn rms_norm_output_has_unit_rms() {
    let x = randn(vec![8], 3);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gain = g.constant(Tensor::ones(vec![8]));
    let y = g.rms_norm(xv, gain, 0.0).unwrap();
    let rms = (g.value(y).data().iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
    assert!((rms - 1.0).abs() < 1e-9, "rms {rms}");
}

#[test]
fn rms_norm_gradient_check() {
    let x = randn(vec![3, 8], 4).with_grad();
    let gain = randn(vec![8], 5).with_grad();
    let err = finite_diff_check(
        |g, vars| {
            let y = g.rms_norm(vars[0], vars[1], 1e-5)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        &[x, gain],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn attention_single_position_returns_v() {
    let mut g = Graph::new();
    let q = g.constant(randn(vec![1, 4], 6));
    let k = g.constant(randn(vec![1, 4], 7));
    let v = g.constant(randn(vec![1, 4], 8));
    let out = g.causal_attention(q, k, v, Some(50_000.0)).unwrap();
    let vv = {
        let mut g2 = Graph::new();
        let v2 = g2.constant(randn(vec![1, 4], 8));
        g2.value(v2).clone()
    };
    for (a, b) in g.value(out).data().iter().zip(vv.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn attention_zero_scores_average_causal_prefix() {
    let n = 5;
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(vec![n, 4]));
    let k = g.constant(Tensor::zeros(vec![n, 4]));
    let v = g.constant(randn(vec![n, 4], 9));
    let out = g.causal_attention(q, k, v, Some(50_000.0)).unwrap();
    let vv = randn(vec![n, 4], 9);
    for i in 0..n {
        for j in 0..4 {
            let mean: f64 = (0..=i).map(|p| vv.get2(p, j)).sum::<f64>() / (i + 1) as f64;
            let got = g.value(out).get2(i, j);
            assert!((got - mean).abs() < 1e-12, "row {i} col {j}: {got} vs {mean}");
        }
    }
}

#[test]
fn attention_is_causal_in_v() {
    // Row i of the output must not change when v rows > i change.
    let q = randn(vec![4, 4], 10);
    let k = randn(vec![4, 4], 11);
    let v = randn(vec![4, 4], 12);
    let run = |v: &Tensor| {
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let kv = g.constant(k.clone());
        let vv = g.constant(v.clone());
        let out = g.causal_attention(qv, kv, vv, Some(50_000.0)).unwrap();
        g.value(out).clone()
    };
    let base = run(&v);
    for perturb_row in 1..4 {
        let mut data = v.data().to_vec();
        for j in 0..4 {
            data[perturb_row * 4 + j] += 10.0;
        }
        let moved = run(&Tensor::matrix(4, 4, data).unwrap());
        for i in 0..perturb_row {
            for j in 0..4 {
                assert_eq!(base.get2(i, j), moved.get2(i, j), "row {i} leaked from {perturb_row}");
            }
        }
    }
}

#[test]
fn attention_is_causal_in_q_and_k_too() {
    let q = randn(vec![6, 4], 20);
    let k = randn(vec![6, 4], 21);
    let v = randn(vec![6, 4], 22);
    let run = |q: &Tensor, k: &Tensor| {
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let kv = g.constant(k.clone());
        let vv = g.constant(v.clone());
        let out = g.causal_attention(qv, kv, vv, Some(50_000.0)).unwrap();
        g.value(out).clone()
    };
    let base = run(&q, &k);
    let mut q2 = q.data().to_vec();
    let mut k2 = k.data().to_vec();
    for j in 0..4 {
        q2[5 * 4 + j] = -3.0;
        k2[5 * 4 + j] = 4.0;
    }
    let moved = run(
        &Tensor::matrix(6, 4, q2).unwrap(),
        &Tensor::matrix(6, 4, k2).unwrap(),
    );
    for i in 0..5 {
        for j in 0..4 {
            assert_eq!(base.get2(i, j), moved.get2(i, j));
        }
    }
}

#[test]
fn attention_gradient_check() {
    let q = randn(vec![3, 4], 13).with_grad();
    let k = randn(vec![3, 4], 14).with_grad();
    let v = randn(vec![3, 4], 15).with_grad();
    let err = finite_diff_check(
        |g, vars| {
            let y = g.causal_attention(vars[0], vars[1], vars[2], Some(50_000.0))?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        &[q, k, v],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn attention_rejects_odd_head_dim_with_rotary() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(vec![2, 3]));
    let k = g.constant(Tensor::zeros(vec![2, 3]));
    let v = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(g.causal_attention(q, k, v, Some(50_000.0)).is_err());
    // Without rotary an odd head dim is fine.
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(vec![2, 3]));
    let k = g.constant(Tensor::zeros(vec![2, 3]));
    let v = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(g.causal_attention(q, k, v, None).is_ok());
}

#[test]
fn relu_squared_definition() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-3.0, 2.0, 0.0]).unwrap());
    let y = g.relu_squared(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 4.0, 0.0]);
}

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let logits = Tensor::matrix(3, 16, vec![0.25; 48]).unwrap();
    let loss = cross_entropy_value(&logits, &[0, 5, 15]).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn cross_entropy_rejects_out_of_vocab_target() {
    let logits = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
    assert!(matches!(
        cross_entropy_value(&logits, &[4]),
        Err(TensorError::TokenOutOfRange { id: 4, vocab: 4 })
    ));
}

#[test]
fn cross_entropy_gradient_check() {
    let logits = randn(vec![3, 16], 16).with_grad();
    let targets = vec![2, 9, 15];
    let err = finite_diff_check(
        |g, vars| g.cross_entropy(vars[0], &targets),
        &[logits],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(randn(vec![2, 3], 17).with_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let t = randn(vec![5], 18);
    let mut g = Graph::new();
    let x = g.leaf(t.clone().with_grad());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (gx, tx) in g.grad(x).unwrap().iter().zip(t.data()) {
        assert!((gx - 2.0 * tx).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_seed() {
    let mut g = Graph::new();
    let x = g.leaf(randn(vec![2, 2], 19).with_grad());
    let y = g.mul(x, x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarSeed(_))));
}

#[test]
fn backward_rejects_reentry() {
    let mut g = Graph::new();
    let x = g.leaf(randn(vec![3], 20).with_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::BackwardReentry)));
}

#[test]
fn grad_is_absent_for_non_requiring_leaf() {
    let mut g = Graph::new();
    let x = g.leaf(randn(vec![3], 21).with_grad());
    let c = g.constant(randn(vec![3], 22));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(c).is_none(), "constant leaf must have no gradient slot");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(randn(vec![16, 16], 23));
        let b = g.constant(randn(vec![16, 16], 24));
        let m = g.matmul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.value(s).item()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn non_finite_forward_is_surfaced() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![800.0]).unwrap());
    // exp(800) overflows to +inf; the op must error, not store it.
    assert!(matches!(g.exp(x), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn every_op_passes_gradient_check_on_multiple_shapes() {
    // Composite touching every differentiable op, run over three shapes.
    for (rows, seed) in [(2usize, 30u64), (3, 31), (5, 32)] {
        let d = 4;
        let x = randn(vec![rows, d], seed).with_grad();
        let w = randn(vec![d, d], seed + 100).with_grad();
        let gain = randn(vec![d], seed + 200).with_grad();
        let v = randn(vec![d], seed + 300).with_grad();
        let rowv = randn(vec![rows], seed + 400).with_grad();
        let err = finite_diff_check(
            |g, vars| {
                let (x, w, gain, v, rowv) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
                let mm = g.matmul(x, w)?;
                let normed = g.rms_norm(mm, gain, 1e-5)?;
                let act = g.relu_squared(normed)?;
                let att = g.causal_attention(act, x, mm, Some(50_000.0))?;
                let diag = g.mul_row_vec(att, v)?;
                let scaled = g.scale_rows(diag, rowv)?;
                let wt = g.transpose(w)?;
                let mixed = g.matmul(scaled, wt)?;
                let cat = g.concat_cols(&[mixed, x])?;
                let sl = g.slice_cols(cat, 1, d)?;
                let tame = g.scale(sl, 0.2)?;
                let sp = g.softplus(tame)?;
                let ex = g.exp(sp)?;
                let neg = g.neg(ex)?;
                let sub = g.sub(neg, x)?;
                let sc = g.scale(sub, 0.7)?;
                let added = g.add(sc, x)?;
                let sq = g.mul(added, added)?;
                let m = g.mean(sq)?;
                Ok(m)
            },
            &[x, w, gain, v, rowv],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rows {rows}: rel err {err}");
    }
}

#[test]
fn embed_gradient_accumulates_repeated_ids() {
    let table = randn(vec![5, 3], 33).with_grad();
    let ids = vec![1, 1, 4];
    let err = finite_diff_check(
        |g, vars| {
            let e = g.embed(vars[0], &ids)?;
            let sq = g.mul(e, e)?;
            g.sum(sq)
        },
        &[table],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn embed_rejects_out_of_range_id() {
    let mut g = Graph::new();
    let table = g.constant(randn(vec![5, 3], 34));
    assert!(matches!(
        g.embed(table, &[5]),
        Err(TensorError::TokenOutOfRange { id: 5, vocab: 5 })
    ));
}

#[test]
fn flop_counter_tracks_matmul_macs() {
    let mut g = Graph::new();
    let a = g.leaf(randn(vec![2, 3], 35).with_grad());
    let b = g.leaf(randn(vec![3, 4], 36).with_grad());
    let m = g.matmul(a, b).unwrap();
    let s = g.sum(m).unwrap();
    assert_eq!(g.flops().forward_macs, 24.0);
    g.backward(s).unwrap();
    // Backward is two matmuls of the same volume.
    assert_eq!(g.flops().backward_macs, 48.0);
}

#[test]
fn rotary_preserves_norm_and_inverts() {
    let x = randn(vec![6, 8], 37);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.rotary(xv, 50_000.0).unwrap();
    // Rotation preserves the per-row norm.
    for i in 0..6 {
        let nx: f64 = x.row(i).iter().map(|v| v * v).sum();
        let ny: f64 = g.value(y).row(i).iter().map(|v| v * v).sum();
        assert!((nx - ny).abs() < 1e-12);
    }
    // Position 0 is the identity rotation.
    assert_eq!(g.value(y).row(0), x.row(0));
}

fn _assert_send<T: Send>() {}

#[test]
fn tensors_are_send_for_parallel_workers() {
    _assert_send::<Tensor>();
    _assert_send::<Graph>();
    _assert_send::<Var>();
}
