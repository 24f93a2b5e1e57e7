use crate::error::{Error, Result};

/// Huber penalty of a non-negative residual: quadratic up to `delta`,
/// linear beyond, continuous and C¹ at the switch.
pub fn huber(x: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("huber delta must be > 0, got {delta}")));
    }
    if x < 0.0 || x.is_nan() {
        return Err(Error::InvalidInput(format!("huber input must be >= 0, got {x}")));
    }
    Ok(if x <= delta {
        0.5 * x * x
    } else {
        delta * (x - 0.5 * delta)
    })
}

/// Derivative of [`huber`] with respect to `x`.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x <= delta {
        x
    } else {
        delta
    }
}

/// `ln(1 + eˣ)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
