//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds a tape program from scratch for every perturbed
//! coordinate, so it stays independent of the analytic backward pass it is
//! judging. It is used throughout the test suite and by the acceptance
//! checks; it is not part of the training path.

use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Central-difference step. Large enough to survive f64 cancellation,
/// small enough that curvature error stays below the tolerances.
pub const STEP: f64 = 1e-5;
/// Relative tolerance on each gradient coordinate.
pub const RTOL: f64 = 1e-4;
/// Absolute floor so near-zero gradients do not demand exact agreement.
pub const ATOL: f64 = 1e-8;

/// Compares the analytic gradient of a scalar-valued tape program against a
/// central-difference estimate for every coordinate of every input, and
/// panics with the offending coordinate on mismatch.
///
/// `build` must construct the same computation whenever it is called with
/// the same input values; it is invoked twice per coordinate.
pub fn assert_gradients<F>(inputs: &[Matrix], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Matrix]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.param(m.clone())).collect();
        let l = build(&mut t, &vs);
        t.scalar(l).unwrap()
    };

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.dim()));
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let mut plus = inputs.to_vec();
                plus[k][(r, c)] += STEP;
                let mut minus = inputs.to_vec();
                minus[k][(r, c)] -= STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
                let a = analytic[(r, c)];
                let tol = ATOL + RTOL * a.abs().max(numeric.abs());
                assert!(
                    (a - numeric).abs() <= tol,
                    "input {k} at ({r},{c}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }
}
