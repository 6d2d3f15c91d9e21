//! Gradient fidelity sweep: every differentiable op checked against central
//! finite differences on at least 100 random small inputs.

use pointer_core::check::finite_diff_check;
use pointer_core::rng::Stream;
use pointer_core::{Tape, Tensor, Var};
use proptest::prelude::*;

fn rand_tensor(rng: &mut Stream, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_sym(scale)).collect()).unwrap()
}

/// Weighted sum keeps the scalarization non-degenerate.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> pointer_core::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mut rng = Stream::new(seed);
    let w = tape.constant(Tensor::new(
        shape,
        (0..n).map(|_| rng.uniform_sym(1.0) + 0.1).collect(),
    )?);
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

#[test]
fn hundred_random_op_gradients_match_fd() {
    let mut rng = Stream::new(0xFD0);
    let mut checked = 0usize;
    while checked < 120 {
        let case = checked % 8;
        let rows = 1 + rng.below(8);
        let cols = 1 + rng.below(8);
        let seed = rng.next_u64();
        let err = match case {
            0 => {
                // matmul wrt left operand
                let k = 1 + rng.below(8);
                let x = rand_tensor(&mut rng, &[rows, k], 1.0);
                let b = rand_tensor(&mut rng, &[k, cols], 1.0);
                finite_diff_check(
                    |tape, v| {
                        let bc = tape.constant(b.clone());
                        let y = tape.matmul(v, bc)?;
                        weighted_sum(tape, y, seed)
                    },
                    &x,
                    1e-3,
                )
                .unwrap()
            }
            1 => {
                let x = rand_tensor(&mut rng, &[rows, cols], 2.0);
                let y = rand_tensor(&mut rng, &[rows, cols], 2.0);
                finite_diff_check(
                    |tape, v| {
                        let yc = tape.constant(y.clone());
                        let s = tape.add(v, yc)?;
                        let p = tape.mul(s, s)?;
                        weighted_sum(tape, p, seed)
                    },
                    &x,
                    1e-3,
                )
                .unwrap()
            }
            2 => {
                let x = rand_tensor(&mut rng, &[rows, cols], 2.0);
                finite_diff_check(
                    |tape, v| {
                        let r = tape.relu(v)?;
                        weighted_sum(tape, r, seed)
                    },
                    &x,
                    1e-3,
                )
                .unwrap()
            }
            3 => {
                let x = rand_tensor(&mut rng, &[rows, cols], 3.0);
                finite_diff_check(
                    |tape, v| {
                        let s = tape.sigmoid(v)?;
                        weighted_sum(tape, s, seed)
                    },
                    &x,
                    1e-3,
                )
                .unwrap()
            }
            4 => {
                let x = rand_tensor(&mut rng, &[rows, cols], 3.0);
                finite_diff_check(
                    |tape, v| {
                        let s = tape.softmax_last(v)?;
                        weighted_sum(tape, s, seed)
                    },
                    &x,
                    1e-3,
                )
                .unwrap()
            }
            5 => {
                // layer norm wrt input. Width >= 3: at d=2 the normalized
                // output saturates to ±1 for any well-separated row, the
                // true gradient collapses to an eps-sized correction, and
                // f32 cancellation noise swamps any relative comparison.
                let cols = 3 + rng.below(6);
                let x = rand_tensor(&mut rng, &[rows, cols], 2.0);
                let gamma = rand_tensor(&mut rng, &[cols], 1.0);
                let beta = rand_tensor(&mut rng, &[cols], 1.0);
                finite_diff_check(
                    |tape, v| {
                        let g = tape.constant(gamma.clone());
                        let b = tape.constant(beta.clone());
                        let y = tape.layer_norm(v, g, b, 1e-5)?;
                        weighted_sum(tape, y, seed)
                    },
                    &x,
                    1e-4,
                )
                .unwrap()
            }
            6 => {
                // embedding table wrt gathered rows
                let v_rows = 2 + rng.below(6);
                let ids: Vec<u32> = (0..rows).map(|_| rng.below(v_rows) as u32).collect();
                let table = rand_tensor(&mut rng, &[v_rows, cols], 1.0);
                finite_diff_check(
                    |tape, v| {
                        let g = tape.gather(v, &ids)?;
                        weighted_sum(tape, g, seed)
                    },
                    &table,
                    1e-3,
                )
                .unwrap()
            }
            _ => {
                // cross entropy wrt logits
                let vcb = 2 + rng.below(7);
                let logits = rand_tensor(&mut rng, &[rows, vcb], 2.0);
                let targets: Vec<u32> = (0..rows).map(|_| rng.below(vcb) as u32).collect();
                let mask: Vec<bool> = (0..rows).map(|i| i == 0 || rng.below(2) == 1).collect();
                finite_diff_check(
                    |tape, v| tape.cross_entropy(v, &targets, &mask),
                    &logits,
                    1e-3,
                )
                .unwrap()
            }
        };
        assert!(err < 1e-2, "case {case} iteration {checked}: rel err {err}");
        checked += 1;
    }
}

#[test]
fn backward_three_layer_composite_matches_fd() {
    // linear -> relu -> linear -> sigmoid -> weighted CE-style readout
    let mut rng = Stream::new(0xC0FFEE);
    for trial in 0..10 {
        let (n, d, h) = (2 + rng.below(4), 2 + rng.below(5), 2 + rng.below(5));
        let x = rand_tensor(&mut rng, &[n, d], 1.0);
        let w1 = rand_tensor(&mut rng, &[d, h], 1.0);
        let w2 = rand_tensor(&mut rng, &[h, d], 1.0);
        let err = finite_diff_check(
            |tape, v| {
                let w1c = tape.constant(w1.clone());
                let w2c = tape.constant(w2.clone());
                let a = tape.matmul(v, w1c)?;
                let a = tape.relu(a)?;
                let b = tape.matmul(a, w2c)?;
                let b = tape.sigmoid(b)?;
                weighted_sum(tape, b, trial)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "trial {trial}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_stay_stochastic_at_large_magnitudes(
        rows in 1usize..5,
        cols in 1usize..9,
        scale in prop_oneof![Just(1.0f32), Just(100.0), Just(1e4)],
        seed in any::<u64>(),
    ) {
        let mut rng = Stream::new(seed);
        let n = rows * cols;
        let data: Vec<f32> = (0..n).map(|_| rng.uniform_sym(scale)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax_last(x).unwrap();
        for r in 0..rows {
            let row = tape.value(s).row(r);
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn backward_is_bit_deterministic_after_zeroing(
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = Stream::new(seed);
        let x = rand_tensor(&mut rng, &[n, n], 1.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.sigmoid(v).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g1: Vec<u32> = tape.grad(v).unwrap().iter().map(|f| f.to_bits()).collect();
        tape.zero_grads();
        tape.backward(loss).unwrap();
        let g2: Vec<u32> = tape.grad(v).unwrap().iter().map(|f| f.to_bits()).collect();
        prop_assert_eq!(g1, g2);
    }
}
