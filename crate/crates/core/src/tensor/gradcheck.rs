use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_abs_error: f64,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks `d f(x) / d x` for a scalar-valued tape function `f`.
///
/// `f` receives a fresh tape and the leaf holding `x`; it must return a
/// scalar node. Errors from `f` propagate; the comparison itself never fails.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let analytic = if tape.recorded_ops() == 0 {
        Tensor::zeros(x.shape().to_vec())
    } else {
        tape.backward(out)?
            .take(leaf)
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut numeric = vec![0.0; x.numel()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        *n = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    let numeric = Tensor::new(x.shape().to_vec(), numeric)?;

    let mut max_abs_error = 0.0f64;
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        max_abs_error = max_abs_error.max(abs);
        if rel > max_rel_error || !rel.is_finite() {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_abs_error,
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error < tol,
    })
}
