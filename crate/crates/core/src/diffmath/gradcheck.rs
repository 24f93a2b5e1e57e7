use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the recorded gradient of a scalar function against central
/// differences.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, floor)` where
/// `floor` is 1% of the largest numeric gradient magnitude (at least 1e-10),
/// so entries that are zero up to rounding do not dominate the report.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps, tol, |g| g)
}

/// [`grad_check`] with a hook that can rewrite the recorded gradient before
/// comparison (used for negative controls).
pub fn grad_check_with<F, H>(f: F, x: &Tensor, eps: f64, tol: f64, hook: H) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
    H: Fn(Vec<f64>) -> Vec<f64>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    tape.backward(y)?;
    let analytic = hook(
        tape.grad(xv)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; x.numel()]),
    );

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&tape, v)?;
        Ok(tape.value(y).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }

    let floor = (0.01 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-10);
    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > worst || rel.is_nan() {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        passed: worst <= tol,
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}
