//! Central finite-difference gradient checks.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over entries with |analytic| > `floor`.
    pub max_rel_err: f64,
    /// Largest absolute error over the remaining entries.
    pub max_abs_err_small: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol && self.max_abs_err_small <= rel_tol
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const ANALYTIC_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of the scalar `f(input)` against central
/// differences with step `h`, perturbing each entry of `input` in turn.
pub fn check<F>(input: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_grad());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut report = GradCheck::default();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if a.abs() > ANALYTIC_FLOOR {
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
        } else {
            report.max_abs_err_small = report.max_abs_err_small.max((a - numeric).abs());
        }
        report.checked += 1;
    }
    Ok(report)
}
