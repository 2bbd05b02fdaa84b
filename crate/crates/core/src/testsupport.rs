//! Shared helpers for gradient tests: a central-difference oracle that knows
//! nothing about the tape's backward rules, plus small assertion utilities.

use crate::rng::{rng, uniform_in};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - b| <= tol * max(1, |a|, |b|)`.
pub(crate) fn assert_rel_close(a: f64, b: f64, tol: f64, what: &str) {
    let denom = a.abs().max(b.abs()).max(1.0);
    assert!(
        (a - b).abs() <= tol * denom,
        "{what}: {a} vs {b} (rel tol {tol})"
    );
}

/// Reduce any tensor on the tape to a scalar through a fixed pseudo-random
/// linear functional, so every output coordinate influences the loss.
pub(crate) fn weighted_scalar(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let n = tape.value(v).len();
    let mut r = rng(seed);
    let w: Vec<f64> = (0..n).map(|_| uniform_in(&mut r, -1.0, 1.0)).collect();
    let wv = tape.constant(Tensor::new(vec![1, n], w).unwrap());
    let col = tape.reshape(v, vec![n, 1]).unwrap();
    let prod = tape.matmul(wv, col).unwrap();
    tape.reshape(prod, vec![1]).unwrap()
}

/// Compare backward-pass gradients against central finite differences.
///
/// `build` records a scalar-valued function of the given leaves on a fresh
/// tape; it runs once for the analytic gradient and twice per input
/// coordinate for the numeric probe, so the oracle only ever exercises the
/// forward pass. Inputs are drawn uniformly from [-1, 1] with the given seed,
/// making each call deterministic.
pub(crate) fn check_grads_fd<F>(
    leaf_shapes: &[Vec<usize>],
    build: F,
    seed: u64,
    h: f64,
    tol: f64,
    what: &str,
) where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut r = rng(seed);
    let x0: Vec<Vec<f64>> = leaf_shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| uniform_in(&mut r, -1.0, 1.0))
                .collect()
        })
        .collect();

    let eval = |xs: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaf_shapes
            .iter()
            .zip(xs)
            .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).len(), 1, "{what}: build must return a scalar");
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaf_shapes
        .iter()
        .zip(&x0)
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap()))
        .collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward failed");

    for (li, _) in leaf_shapes.iter().enumerate() {
        let analytic = grads.of(vars[li]).data().to_vec();
        for (j, &aj) in analytic.iter().enumerate() {
            let mut plus = x0.clone();
            plus[li][j] += h;
            let mut minus = x0.clone();
            minus[li][j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = aj.abs().max(numeric.abs()).max(1.0);
            assert!(
                (aj - numeric).abs() <= tol * denom,
                "{what}: leaf {li} coord {j}: analytic {aj} vs numeric {numeric}"
            );
        }
    }
}
