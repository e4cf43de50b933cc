//! Central finite differences for verifying analytic gradients.
//!
//! These helpers only ever evaluate the forward function, so they stay
//! independent of the backward pass they are used to check.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference derivative of `f` at `x` along a single coordinate.
pub fn partial(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, index: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[index] += h;
    let mut xm = x.clone();
    xm.data_mut()[index] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Full central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        g.data_mut()[i] = partial(&mut f, x, i, h);
    }
    g
}

/// Builds `build(tape, x)` with `x` as the only parameter and returns the max
/// relative error between its backward-pass gradient and finite differences.
pub fn check_unary_graph(x0: &Tensor<f64>, build: fn(&mut Tape<f64>, Var) -> Var, h: f64) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let out = build(&mut tape, x);
    let analytic = tape.backward(out).take(x).unwrap_or_else(|| Tensor::zeros(x0.rows(), x0.cols()));
    let numeric = numeric_gradient(
        |xv| {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let out = build(&mut t, x);
            t.value(out).item()
        },
        x0,
        h,
    );
    max_rel_error(&analytic, &numeric)
}
