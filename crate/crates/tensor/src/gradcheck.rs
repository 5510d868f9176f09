//! Central finite-difference oracle for the tape.

use crate::error::{contract, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Report of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)`
    pub max_rel_err: f64,
}

/// Compares `backward()` of `f` at `x` against `(f(x+h·e_i) - f(x-h·e_i)) / 2h`.
///
/// `f` must be deterministic and return a scalar.
pub fn finite_diff_check(f: impl Fn(&Var) -> Result<Var>, x: &Tensor, h: f64) -> Result<GradCheck> {
    if h <= 0.0 {
        return Err(contract("finite_diff_check", "step must be positive"));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&leaf)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |t: Tensor| -> Result<f64> { f(&Var::constant(t))?.value().item() };
    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    let numeric = Tensor::new(x.shape().to_vec(), numeric)?;
    let max_rel_err = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}

pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
