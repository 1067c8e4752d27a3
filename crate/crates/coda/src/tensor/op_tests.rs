use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = g.leaf(&eye, false).unwrap();
    let b = g.leaf(&eye, false).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), eye.data());
}

#[test]
fn matmul_analytic() {
    let mut g = Graph::new();
    let a = g
        .leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
        .unwrap();
    let b = g.leaf(&Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(), false).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::zeros(vec![3, 4]), false).unwrap();
    let b = g.leaf(&Tensor::zeros(vec![5, 2]), false).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let x = rand_tensor(vec![3, 4], seed);
        let w = rand_tensor(vec![4, 2], 100 + seed);
        let err = grad_check(
            |g, v| {
                let wv = g.leaf(&w, false)?;
                let y = g.matmul(v, wv)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
        // also w.r.t. the right operand
        let err = grad_check(
            |g, v| {
                let xv = g.leaf(&x, false)?;
                let y = g.matmul(xv, v)?;
                g.sum(y)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: rhs rel err {err}");
    }
}

#[test]
fn batched_matmul_with_transpose_checks_out() {
    let x = rand_tensor(vec![2, 3, 4, 5], 1);
    let y = rand_tensor(vec![2, 3, 6, 5], 2);
    let err = grad_check(
        |g, v| {
            let yv = g.leaf(&y, true)?;
            let c = g.matmul_ext(v, yv, true)?;
            g.sum(c)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn row_softmax_symmetry() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false).unwrap();
    let y = g.row_softmax(x).unwrap();
    assert!((g.value(y)[0] - 0.5).abs() < 1e-15);
    assert!((g.value(y)[1] - 0.5).abs() < 1e-15);
}

#[test]
fn row_softmax_analytic_ratio() {
    let mut g = Graph::new();
    let x = g
        .leaf(&Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap(), false)
        .unwrap();
    let y = g.row_softmax(x).unwrap();
    assert!((g.value(y)[0] - 0.25).abs() < 1e-12);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-12);
}

#[test]
fn row_softmax_mask_sentinel() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(vec![1, 2], vec![0.0, -1e9]).unwrap(), false).unwrap();
    let y = g.row_softmax(x).unwrap();
    assert!(g.value(y)[0] >= 1.0 - 1e-9);
}

#[test]
fn row_softmax_rows_sum_to_one_over_wide_range() {
    let mut g = Graph::new();
    let x = g
        .leaf(
            &Tensor::new(vec![2, 3], vec![-1e9, 0.0, 1e2, 5.0, -3.0, 42.0]).unwrap(),
            false,
        )
        .unwrap();
    let y = g.row_softmax(x).unwrap();
    for row in g.value(y).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn elementwise_add_and_leaky() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false).unwrap();
    let b = g.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), false).unwrap();
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c), &[4.0, 6.0]);
    let x = g.leaf(&Tensor::scalar(-2.0), false).unwrap();
    let y = g.leaky_rect(x, 0.01).unwrap();
    assert!((g.value(y)[0] + 0.02).abs() < 1e-15);
}

#[test]
fn mul_gradient_check() {
    for seed in 0..10 {
        let a = rand_tensor(vec![2, 3], seed);
        let b = rand_tensor(vec![2, 3], 50 + seed);
        let err = grad_check(
            |g, v| {
                let bv = g.leaf(&b, false)?;
                let y = g.mul(v, bv)?;
                g.sum(y)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn cross_entropy_uniform_is_ln2() {
    let mut g = Graph::new();
    let logits = g.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false).unwrap();
    let loss = g.cross_entropy(logits, &[0], None, 0.0).unwrap();
    assert!((g.value(loss)[0] - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_certain_prediction_is_zero() {
    let mut g = Graph::new();
    let logits = g.leaf(&Tensor::new(vec![1, 2], vec![1e9, 0.0]).unwrap(), false).unwrap();
    let loss = g.cross_entropy(logits, &[0], None, 0.0).unwrap();
    assert!(g.value(loss)[0].abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let logits = rand_tensor(vec![4, 7], 9);
    let targets = [3usize, 0, 6, 2];
    // independent hand evaluation via log-sum-exp
    let mut want = 0.0;
    for (row, &t) in logits.data().chunks(7).zip(&targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        want += lse - row[t];
    }
    want /= 4.0;
    let mut g = Graph::new();
    let lv = g.leaf(&logits, false).unwrap();
    let loss = g.cross_entropy(lv, &targets, None, 0.0).unwrap();
    assert!((g.value(loss)[0] - want).abs() < 1e-9);
}

#[test]
fn cross_entropy_out_of_range_target() {
    let mut g = Graph::new();
    let lv = g.leaf(&Tensor::zeros(vec![1, 3]), false).unwrap();
    assert!(matches!(
        g.cross_entropy(lv, &[3], None, 0.0),
        Err(crate::Error::Index { .. })
    ));
}

#[test]
fn cross_entropy_respects_ignore_index() {
    let mut g = Graph::new();
    let lv = g
        .leaf(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 1e9, 0.0]).unwrap(), false)
        .unwrap();
    // second row is ignored, so the loss is just ln 2 from the first
    let loss = g.cross_entropy(lv, &[0, 9], Some(9), 0.0).unwrap();
    assert!((g.value(loss)[0] - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::full(vec![1, 3], 1.0), false).unwrap();
    let gain = g.leaf(&Tensor::full(vec![3], 1.0), false).unwrap();
    let bias = g.leaf(&Tensor::zeros(vec![3]), false).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    for &v in g.value(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gradient_check() {
    for seed in 0..10 {
        let x = rand_tensor(vec![2, 5], seed);
        let gain = rand_tensor(vec![5], 60 + seed);
        let bias = rand_tensor(vec![5], 70 + seed);
        let err = grad_check(
            |g, v| {
                let gv = g.leaf(&gain, false)?;
                let bv = g.leaf(&bias, false)?;
                let y = g.layer_norm(v, gv, bv)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn embedding_lookup_picks_rows() {
    let mut g = Graph::new();
    let table = g
        .leaf(
            &Tensor::new(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap(),
            false,
        )
        .unwrap();
    let y = g.gather(table, &[2], &[1]).unwrap();
    assert_eq!(g.value(y), &[6.0, 7.0, 8.0]);
    assert!(matches!(
        g.gather(table, &[4], &[1]),
        Err(crate::Error::Index { .. })
    ));
}

#[test]
fn grad_check_linear_function_is_exact() {
    let x = rand_tensor(vec![3, 3], 5);
    // a large step keeps cancellation noise out of the difference quotient;
    // for a linear map the central difference is step-independent
    let err = grad_check(|g, v| g.sum(v), &x, 0.25).unwrap();
    assert!(err < 1e-12);
}

#[test]
fn grad_of_sum_of_squares_is_analytic() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(&x, true).unwrap();
    let sq = g.mul(v, v).unwrap();
    let y = g.sum(sq).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
}

#[test]
fn softmax_cross_entropy_composite_grad_check() {
    for seed in 0..10 {
        let x = rand_tensor(vec![3, 5], 200 + seed);
        let err = grad_check(
            |g, v| {
                let s = g.scale(v, 1.7)?;
                g.cross_entropy(s, &[1, 4, 0], None, 0.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn fanout_accumulates_gradients() {
    // f(x) = sum(x + x) has gradient 2 everywhere
    let x = rand_tensor(vec![4], 3);
    let mut g = Graph::new();
    let v = g.leaf(&x, true).unwrap();
    let s = g.add(v, v).unwrap();
    let y = g.sum(s).unwrap();
    g.backward(y).unwrap();
    for &gv in g.grad(v).unwrap() {
        assert_eq!(gv, 2.0);
    }
}

#[test]
fn forward_is_deterministic() {
    let x = rand_tensor(vec![4, 4], 11);
    let w = rand_tensor(vec![4, 4], 12);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(&x, false).unwrap();
        let wv = g.leaf(&w, false).unwrap();
        let y = g.matmul(xv, wv).unwrap();
        let s = g.row_softmax(y).unwrap();
        g.value(s).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(vec![1], vec![1e308]).unwrap(), false).unwrap();
    let doubled = g.add(x, x);
    assert!(matches!(doubled, Err(crate::Error::Numeric { .. })));
}

#[test]
fn permute_roundtrip_grad() {
    let x = rand_tensor(vec![2, 3, 4, 5], 21);
    let err = grad_check(
        |g, v| {
            let p = g.permute(v, &[0, 3, 2, 1])?;
            let q = g.leaky_rect(p, 0.01)?;
            g.sum(q)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_always_stochastic(
            data in proptest::collection::vec(-50.0f64..50.0, 12)
        ) {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::new(vec![3, 4], data).unwrap(), false).unwrap();
            let s = g.row_softmax(x).unwrap();
            for row in g.value(s).chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn permute_reshape_preserve_multiset(
            data in proptest::collection::vec(-10.0f64..10.0, 24)
        ) {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::new(vec![2, 3, 4], data.clone()).unwrap(), false).unwrap();
            let p = g.permute(x, &[2, 0, 1]).unwrap();
            let r = g.reshape(p, vec![24]).unwrap();
            let mut got = g.value(r).to_vec();
            let mut want = data;
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            prop_assert_eq!(got, want);
        }
    }
}
