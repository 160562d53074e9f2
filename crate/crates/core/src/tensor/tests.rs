use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// FD-checks d(sum(w ⊙ f(x)))/dx against the tape for a single input.
fn fd_check<F>(build: F, x: &Tensor, h: f64, tol: f64, label: &str)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut r = rng(0xFD);
    let out_len = {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = build(&mut tape, xv);
        tape.value(out).numel()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| r.gen_range(-1.0..1.0)).collect();

    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(t.clone());
        let out = build(&mut tape, xv);
        tape.value(out)
            .data
            .iter()
            .zip(&weights)
            .map(|(o, w)| o * w)
            .sum()
    };

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = build(&mut tape, xv);
    let w = tape.constant(Tensor::from_vec(tape.shape(out).to_vec(), weights.clone()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).expect("input gradient").to_vec();

    let numeric = finite_diff_grad(eval, x, h);
    for (i, (a, n)) in analytic.iter().zip(&numeric.data).enumerate() {
        let err = rel_err(*a, *n);
        assert!(
            err < tol,
            "{}: coordinate {} analytic {} vs numeric {} (rel err {})",
            label,
            i,
            a,
            n,
            err
        );
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(c).data, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_times_column() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape, vec![1, 1]);
    assert_eq!(tape.value(c).data, vec![11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = random_tensor(&[3, 3], &mut r);
    let b = random_tensor(&[3, 3], &mut r);
    // d sum(a·b)/da
    let bc = b.clone();
    fd_check(
        move |tape, av| {
            let bv = tape.constant(bc.clone());
            tape.matmul(av, bv).unwrap()
        },
        &a,
        1e-5,
        1e-6,
        "matmul wrt a",
    );
    let ac = a.clone();
    fd_check(
        move |tape, bv| {
            let av = tape.constant(ac.clone());
            tape.matmul(av, bv).unwrap()
        },
        &b,
        1e-5,
        1e-6,
        "matmul wrt b",
    );
}

// ── batched contractions ────────────────────────────────────────────────

#[test]
fn batched_qk_single_entry() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_vec(vec![1, 1, 1], vec![2.0]).unwrap());
    let k = tape.constant(Tensor::from_vec(vec![1, 1, 1], vec![3.0]).unwrap());
    let s = tape.batched_contract_qk(q, k).unwrap();
    assert_eq!(tape.value(s).data, vec![6.0]);
}

#[test]
fn batched_qk_orthogonal_rows_zero_scores() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = tape.constant(Tensor::from_vec(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 2.0]).unwrap());
    let s = tape.batched_contract_qk(q, k).unwrap();
    assert_eq!(tape.value(s).data, vec![0.0, 0.0]);
}

#[test]
fn batched_qk_matches_naive_loops() {
    let mut r = rng(2);
    let q = random_tensor(&[2, 3, 5], &mut r);
    let k = random_tensor(&[2, 4, 5], &mut r);
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let s = tape.batched_contract_qk(qv, kv).unwrap();
    for h in 0..2 {
        for t in 0..3 {
            for m in 0..4 {
                let mut acc = 0.0;
                for d in 0..5 {
                    acc += q.at3(h, t, d) * k.at3(h, m, d);
                }
                assert!((tape.value(s).at3(h, t, m) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batched_av_one_hot_selects_value_row() {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::from_vec(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let v = tape.constant(
        Tensor::from_vec(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
    );
    let y = tape.batched_contract_av(w, v).unwrap();
    assert_eq!(tape.value(y).data, vec![3.0, 4.0]);
}

#[test]
fn batched_av_uniform_weights_average_value_rows() {
    let mut tape = Tape::new();
    let third = 1.0 / 3.0;
    let w = tape.constant(Tensor::from_vec(vec![1, 1, 3], vec![third; 3]).unwrap());
    let v = tape.constant(
        Tensor::from_vec(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
    );
    let y = tape.batched_contract_av(w, v).unwrap();
    assert!((tape.value(y).data[0] - 3.0).abs() < 1e-12);
    assert!((tape.value(y).data[1] - 4.0).abs() < 1e-12);
}

#[test]
fn batched_av_matches_naive_loops() {
    let mut r = rng(3);
    let w = random_tensor(&[2, 3, 4], &mut r);
    let v = random_tensor(&[2, 4, 5], &mut r);
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let vv = tape.constant(v.clone());
    let y = tape.batched_contract_av(wv, vv).unwrap();
    for h in 0..2 {
        for t in 0..3 {
            for d in 0..5 {
                let mut acc = 0.0;
                for m in 0..4 {
                    acc += w.at3(h, t, m) * v.at3(h, m, d);
                }
                assert!((tape.value(y).at3(h, t, d) - acc).abs() < 1e-12);
            }
        }
    }
}

// ── layer norm ──────────────────────────────────────────────────────────

const LN_EPS: f64 = 1e-5;

#[test]
fn layer_norm_already_normalized_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let gain = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
    let bias = tape.constant(Tensor::zeros(vec![2]));
    let y = tape.layer_norm(x, gain, bias, LN_EPS).unwrap();
    assert!((tape.value(y).data[0] - 1.0).abs() < 1e-4);
    assert!((tape.value(y).data[1] + 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_constant_row_yields_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1, 3], vec![7.0, 7.0, 7.0]).unwrap());
    let gain = tape.constant(Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap());
    let bias = tape.constant(Tensor::from_vec(vec![3], vec![0.5, -0.5, 2.0]).unwrap());
    let y = tape.layer_norm(x, gain, bias, LN_EPS).unwrap();
    assert!((tape.value(y).data[0] - 0.5).abs() < 1e-9);
    assert!((tape.value(y).data[1] + 0.5).abs() < 1e-9);
    assert!((tape.value(y).data[2] - 2.0).abs() < 1e-9);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let x = random_tensor(&[4, 8], &mut r);
    fd_check(
        |tape, xv| {
            let gain = tape.constant(Tensor::from_vec(vec![8], vec![1.0; 8]).unwrap());
            let bias = tape.constant(Tensor::zeros(vec![8]));
            tape.layer_norm(xv, gain, bias, LN_EPS).unwrap()
        },
        &x,
        1e-5,
        1e-5,
        "layer_norm wrt x",
    );
    // also the affine parameters
    let xc = x.clone();
    let gain = random_tensor(&[8], &mut r);
    fd_check(
        move |tape, gv| {
            let xv = tape.constant(xc.clone());
            let bias = tape.constant(Tensor::zeros(vec![8]));
            tape.layer_norm(xv, gv, bias, LN_EPS).unwrap()
        },
        &gain,
        1e-5,
        1e-5,
        "layer_norm wrt gain",
    );
}

proptest! {
    #[test]
    fn layer_norm_rows_standardized(seed in 0u64..256) {
        let mut r = rng(seed);
        let rows = 1 + (seed as usize % 5);
        let cols = 4 + (seed as usize % 7);
        let x = random_tensor(&[rows, cols], &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gain = tape.constant(Tensor::from_vec(vec![cols], vec![1.0; cols]).unwrap());
        let bias = tape.constant(Tensor::zeros(vec![cols]));
        let y = tape.layer_norm(xv, gain, bias, LN_EPS).unwrap();
        let yv = tape.value(y);
        for rr in 0..rows {
            let row = &yv.data[rr * cols..(rr + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            // variance is var/(var+eps) of the raw row: within eps-tolerance of 1
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

// ── masked softmax ──────────────────────────────────────────────────────

#[test]
fn masked_softmax_uniform() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(vec![1, 1, 3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.masked_softmax(l, &[vec![true, true, true]]).unwrap();
    for v in &tape.value(y).data {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_two_way_closed_form() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.masked_softmax(l, &[vec![true, true, false]]).unwrap();
    let e = std::f64::consts::E;
    let yv = tape.value(y);
    assert!((yv.data[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
    assert!((yv.data[1] - e / (1.0 + e)).abs() < 1e-12);
    assert_eq!(yv.data[2], 0.0);
}

#[test]
fn masked_softmax_shift_invariance() {
    let mut tape = Tape::new();
    let l1 = tape.constant(Tensor::from_vec(vec![1, 1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap());
    let l2 = tape.constant(
        Tensor::from_vec(vec![1, 1, 4], vec![100.3, 98.8, 102.0, 100.7]).unwrap(),
    );
    let mask = vec![vec![true; 4]];
    let y1 = tape.masked_softmax(l1, &mask).unwrap();
    let y2 = tape.masked_softmax(l2, &mask).unwrap();
    for (a, b) in tape.value(y1).data.iter().zip(&tape.value(y2).data.clone()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_fully_masked_row_zeros_and_warns() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(vec![1, 1, 2], vec![5.0, 5.0]).unwrap());
    let y = tape.masked_softmax(l, &[vec![false, false]]).unwrap();
    assert_eq!(tape.value(y).data, vec![0.0, 0.0]);
    assert_eq!(tape.warnings().len(), 1);
    assert!(tape.warnings()[0].contains("fully masked"));
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(seed in 0u64..256) {
        let mut r = rng(seed);
        let (h, t, m) = (1 + seed as usize % 3, 1 + seed as usize % 4, 2 + seed as usize % 5);
        let logits = random_tensor(&[h, t, m], &mut r);
        // at least one allowed entry per row
        let mask: Vec<Vec<bool>> = (0..t)
            .map(|_| {
                let mut row: Vec<bool> = (0..m).map(|_| r.gen_bool(0.6)).collect();
                if row.iter().all(|&b| !b) {
                    row[r.gen_range(0..m)] = true;
                }
                row
            })
            .collect();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let y = tape.masked_softmax(l, &mask).unwrap();
        let yv = tape.value(y);
        for hh in 0..h {
            for tt in 0..t {
                let mut sum = 0.0;
                for mm in 0..m {
                    let val = yv.at3(hh, tt, mm);
                    if mask[tt][mm] {
                        prop_assert!(val > 0.0);
                        sum += val;
                    } else {
                        prop_assert_eq!(val, 0.0);
                    }
                }
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}

// ── activations ─────────────────────────────────────────────────────────

#[test]
fn activation_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![3], vec![0.0, -3.0, 3.0]).unwrap());
    let s = tape.sigmoid(x);
    let t = tape.tanh(x);
    let r = tape.relu(x);
    assert_eq!(tape.value(s).data[0], 0.5);
    assert_eq!(tape.value(t).data[0], 0.0);
    assert_eq!(tape.value(r).data, vec![0.0, 0.0, 3.0]);
}

#[test]
fn tanh_gradient_matches_analytic_derivative() {
    let mut r = rng(5);
    let x = random_tensor(&[6], &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = tape.tanh(xv);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    let grad = tape.grad(xv).unwrap();
    for (g, xi) in grad.iter().zip(&x.data) {
        let expect = 1.0 - xi.tanh().powi(2);
        assert!((g - expect).abs() < 1e-10);
    }
}

// ── backward contracts ──────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(vec![2, 2], vec![3.0, -1.0, 0.5, 9.0]).unwrap());
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn stop_gradient_contract() {
    let mut r = rng(6);
    let x = random_tensor(&[4], &mut r);
    let y = random_tensor(&[4], &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let yv = tape.input(y.clone());
    let frozen = tape.stop_grad(xv);
    let prod = tape.mul(frozen, yv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(yv).unwrap(), x.data.as_slice());
    assert!(tape.grad(xv).is_none(), "gradient must be absent behind stop_grad");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(vec![2, 2]));
    let err = tape.backward(x).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn tape_replay_is_bit_identical() {
    let mut r = rng(7);
    let x = random_tensor(&[3, 4], &mut r);
    let w = random_tensor(&[4, 2], &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let wv = tape.input(w);
    let h = tape.matmul(xv, wv).unwrap();
    let a = tape.tanh(h);
    let loss = tape.sum(a);
    tape.backward(loss).unwrap();
    let g1x = tape.grad(xv).unwrap().to_vec();
    let g1w = tape.grad(wv).unwrap().to_vec();
    tape.zero_grads();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), g1x.as_slice());
    assert_eq!(tape.grad(wv).unwrap(), g1w.as_slice());
}

// ── adam ────────────────────────────────────────────────────────────────

#[test]
fn adam_zero_gradient_leaves_parameters_unchanged() {
    let mut p = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
    let g = vec![0.0, 0.0];
    let mut state = OptimState::new(AdamConfig::with_lr(0.1));
    let outcome = state
        .adam_step(&mut [("p".to_string(), &mut p, g.as_slice())])
        .unwrap();
    assert_eq!(outcome, StepOutcome::Updated);
    assert_eq!(p.data, vec![1.0, -2.0]);
    assert_eq!(state.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // bias correction makes the very first step ≈ lr for unit gradient
    let mut p = Tensor::scalar(1.0);
    let g = vec![1.0];
    let mut state = OptimState::new(AdamConfig::with_lr(0.1));
    state
        .adam_step(&mut [("p".to_string(), &mut p, g.as_slice())])
        .unwrap();
    assert!((p.data[0] - 0.9).abs() < 1e-6);
}

#[test]
fn adam_nan_gradient_signals_divergence_without_update() {
    let mut p = Tensor::scalar(1.0);
    let g = vec![f64::NAN];
    let mut state = OptimState::new(AdamConfig::with_lr(0.1));
    let outcome = state
        .adam_step(&mut [("p".to_string(), &mut p, g.as_slice())])
        .unwrap();
    assert_eq!(outcome, StepOutcome::Diverged);
    assert_eq!(p.data, vec![1.0]);
    assert_eq!(state.step_count(), 0);
}

// ── finite differences ──────────────────────────────────────────────────

#[test]
fn finite_diff_quadratic() {
    let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
    let g = finite_diff_grad(|t| t.data.iter().map(|v| v * v).sum(), &x, 1e-5);
    assert!((g.data[0] - 2.0).abs() < 1e-6);
    assert!((g.data[1] - 4.0).abs() < 1e-6);
}

#[test]
fn finite_diff_linear_exact_for_any_step() {
    let x = Tensor::from_vec(vec![3], vec![0.4, -2.0, 5.5]).unwrap();
    let f = |t: &Tensor| 2.0 * t.data[0] - 3.0 * t.data[1] + 0.5 * t.data[2];
    for h in [1e-2, 1e-4, 1e-6] {
        let g = finite_diff_grad(f, &x, h);
        assert!((g.data[0] - 2.0).abs() < 1e-8);
        assert!((g.data[1] + 3.0).abs() < 1e-8);
        assert!((g.data[2] - 0.5).abs() < 1e-8);
    }
}

#[test]
fn finite_diff_agrees_with_backward_on_composition() {
    // layer_norm ∘ matmul
    let mut r = rng(8);
    let x = random_tensor(&[3, 4], &mut r);
    let w = random_tensor(&[4, 4], &mut r);
    let wc = w.clone();
    fd_check(
        move |tape, xv| {
            let wv = tape.constant(wc.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let gain = tape.constant(Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap());
            let bias = tape.constant(Tensor::zeros(vec![4]));
            tape.layer_norm(h, gain, bias, LN_EPS).unwrap()
        },
        &x,
        1e-5,
        1e-5,
        "layer_norm∘matmul",
    );
}

// ── misc op gradients (gather, pick, log-softmax, concat, heads) ────────

#[test]
fn split_merge_heads_round_trip() {
    let mut r = rng(9);
    let x = random_tensor(&[3, 6], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let split = tape.split_heads(xv, 2).unwrap();
    assert_eq!(tape.shape(split), &[2, 3, 3]);
    let merged = tape.merge_heads(split).unwrap();
    assert_eq!(tape.value(merged).data, x.data);
}

#[test]
fn log_softmax_rows_normalizes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.log_softmax_rows(x).unwrap();
    let total: f64 = tape.value(y).data.iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn gather_and_pick_gradients_scatter_correctly() {
    let mut tape = Tape::new();
    let table = tape.input(Tensor::from_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let rows = tape.gather_rows(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(rows).data, vec![5., 6., 1., 2., 5., 6.]);
    let picked = tape.row_pick(rows, &[0, 1, 1]).unwrap();
    assert_eq!(tape.value(picked).data, vec![5., 2., 6.]);
    let loss = tape.sum(picked);
    tape.backward(loss).unwrap();
    // row 2 of the table is picked at column 0 once and column 1 once;
    // row 0 at column 1 once.
    assert_eq!(tape.grad(table).unwrap(), &[0., 1., 0., 0., 1., 1.]);
}
