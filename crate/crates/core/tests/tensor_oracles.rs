//! Forward kernels against naive nested-loop oracles, plus the
//! determinism and no-mutation contracts of the tensor core.

mod support;

use proptest::prelude::*;
use support::*;
use survfuse::tensor::PoolKind;
use survfuse::{Tape, Tensor};

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(11);
    let a = uniform_vec(&mut r, 4 * 3, -2.0, 2.0);
    let b = uniform_vec(&mut r, 3 * 5, -2.0, 2.0);
    let mut tape = Tape::new();
    let at = Tensor::from_vec(vec![4, 3], a.clone()).unwrap();
    let bt = Tensor::from_vec(vec![3, 5], b.clone()).unwrap();
    let got = tape.matmul(&at, &bt).unwrap();
    let want = oracle_matmul(&a, &b, 4, 3, 5);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn conv3d_matches_seven_loop_oracle() {
    for seed in 0..4u64 {
        let mut r = rng(100 + seed);
        let dims = (1usize, 2usize, 5usize, 5usize, 5usize);
        let kdims = (3usize, 3usize, 3usize, 3usize);
        let x = uniform_vec(&mut r, 2 * 125, -1.0, 1.0);
        let w = uniform_vec(&mut r, 3 * 2 * 27, -1.0, 1.0);
        let b = uniform_vec(&mut r, 3, -0.5, 0.5);
        for (stride, padding) in [(1usize, 0usize), (1, 1), (2, 1)] {
            let mut tape = Tape::new();
            let xt = Tensor::from_vec(vec![1, 2, 5, 5, 5], x.clone()).unwrap();
            let wt = Tensor::from_vec(vec![3, 2, 3, 3, 3], w.clone()).unwrap();
            let bt = Tensor::from_vec(vec![3], b.clone()).unwrap();
            let got = tape.conv3d(&xt, &wt, &bt, stride, padding).unwrap();
            let want = oracle_conv3d(&x, dims, &w, kdims, &b, stride, padding);
            assert_eq!(got.numel(), want.len());
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "stride {stride} pad {padding}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn conv3d_exact_match_same_summation_order() {
    // identical accumulation order makes the comparison exact in 64-bit
    let mut r = rng(7);
    let x = uniform_vec(&mut r, 2 * 4 * 8 * 8 * 8, -1.0, 1.0);
    let w = uniform_vec(&mut r, 3 * 4 * 27, -1.0, 1.0);
    let b = uniform_vec(&mut r, 3, -0.5, 0.5);
    let mut tape = Tape::new();
    let xt = Tensor::from_vec(vec![2, 4, 8, 8, 8], x.clone()).unwrap();
    let wt = Tensor::from_vec(vec![3, 4, 3, 3, 3], w.clone()).unwrap();
    let bt = Tensor::from_vec(vec![3], b.clone()).unwrap();
    let got = tape.conv3d(&xt, &wt, &bt, 1, 1).unwrap();
    let want = oracle_conv3d(&x, (2, 4, 8, 8, 8), &w, (3, 3, 3, 3), &b, 1, 1);
    assert_eq!(got.data(), &want[..]);
}

#[test]
fn pool3d_matches_windowed_loop_oracle_exactly() {
    for seed in 0..4u64 {
        let mut r = rng(200 + seed);
        let x = uniform_vec(&mut r, 2 * 3 * 6 * 6 * 6, -3.0, 3.0);
        let xt = Tensor::from_vec(vec![2, 3, 6, 6, 6], x.clone()).unwrap();
        for (kernel, stride) in [(2usize, 2usize), (3, 1), (2, 1)] {
            let mut tape = Tape::new();
            let got_max = tape.pool3d(PoolKind::Max, &xt, kernel, stride).unwrap();
            let got_avg = tape.pool3d(PoolKind::Avg, &xt, kernel, stride).unwrap();
            assert_eq!(
                got_max.data(),
                &oracle_pool3d(true, &x, (2, 3, 6, 6, 6), kernel, stride)[..]
            );
            assert_eq!(
                got_avg.data(),
                &oracle_pool3d(false, &x, (2, 3, 6, 6, 6), kernel, stride)[..]
            );
        }
    }
}

#[test]
fn global_pool_matches_flat_reduction_oracle_exactly() {
    for seed in 0..4u64 {
        let mut r = rng(300 + seed);
        let x = uniform_vec(&mut r, 2 * 5 * 4 * 4 * 4, -2.0, 2.0);
        let xt = Tensor::from_vec(vec![2, 5, 4, 4, 4], x.clone()).unwrap();
        let mut tape = Tape::new();
        let got_max = tape.global_pool(PoolKind::Max, &xt).unwrap();
        let got_avg = tape.global_pool(PoolKind::Avg, &xt).unwrap();
        assert_eq!(got_max.data(), &oracle_global_pool(true, &x, 2, 5, 64)[..]);
        assert_eq!(got_avg.data(), &oracle_global_pool(false, &x, 2, 5, 64)[..]);
    }
}

#[test]
fn forward_determinism_bit_identical() {
    let mut r = rng(42);
    let x = tensor_uniform(&mut r, &[2, 3, 5, 5, 5], -1.0, 1.0);
    let w = tensor_uniform(&mut r, &[4, 3, 3, 3, 3], -1.0, 1.0);
    let b = tensor_uniform(&mut r, &[4], -0.5, 0.5);
    let run = || {
        let mut tape = Tape::new();
        let c = tape.conv3d(&x, &w, &b, 1, 1).unwrap();
        let a = tape.relu(&c).unwrap();
        let p = tape.global_pool(PoolKind::Avg, &a).unwrap();
        p.data().to_vec()
    };
    let first = run();
    let second = run();
    assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ops_never_mutate_input_buffers(values in proptest::collection::vec(-10.0f64..10.0, 8)) {
        let a = Tensor::from_vec(vec![2, 4], values.clone()).unwrap();
        let before = a.data().to_vec();
        let mut tape = Tape::new();
        let _ = tape.relu(&a).unwrap();
        let _ = tape.sigmoid(&a).unwrap();
        let _ = tape.affine(&a, 2.0, -1.0).unwrap();
        let _ = tape.mul(&a, &a).unwrap();
        let _ = tape.transpose(&a).unwrap();
        let _ = tape.sum_all(&a).unwrap();
        prop_assert_eq!(a.data(), &before[..]);
    }

    #[test]
    // upper bound 36: beyond ~36.7 the f64 result rounds to exactly 1.0
    fn sigmoid_outputs_stay_in_open_unit_interval(values in proptest::collection::vec(-300.0f64..36.0, 16)) {
        let a = Tensor::from_vec(vec![16], values).unwrap();
        let mut tape = Tape::new();
        let y = tape.sigmoid(&a).unwrap();
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
