//! Huber loss, its score, and the MAD scale estimate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gaussian consistency constant of the MAD.
pub const MAD_CONSISTENCY: f64 = 0.6745;
/// Default Huber tuning multiplier (`δ = 1.345 ŝ`).
pub const HUBER_C: f64 = 1.345;

/// `½r²` for `|r| ≤ δ`, `δ(|r| − δ/2)` otherwise.
#[inline]
pub fn huber_loss<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::of(0.5) * r * r
    } else {
        delta * (a - T::of(0.5) * delta)
    }
}

/// Derivative of [`huber_loss`]: `r` clipped to `[−δ, δ]`.
#[inline]
pub fn huber_psi<T: Scalar>(r: T, delta: T) -> T {
    if r > delta {
        delta
    } else if r < -delta {
        -delta
    } else {
        r
    }
}

pub fn median<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("median input"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) * T::of(0.5) })
}

/// `median(|r_i|) / consistency`. Returns 0 for all-zero residuals; callers floor δ.
pub fn mad_scale_with<T: Scalar>(residuals: &[T], consistency: T) -> Result<T> {
    let abs: Vec<T> = residuals.iter().map(|r| r.abs()).collect();
    Ok(median(&abs)? / consistency)
}

pub fn mad_scale<T: Scalar>(residuals: &[T]) -> Result<T> {
    mad_scale_with(residuals, T::of(MAD_CONSISTENCY))
}
