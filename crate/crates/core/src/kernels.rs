//! Squared-exponential kernels and separable space-time Gram matrices.
//!
//! A [`KernelParams`] carries one signal variance and one length-scale per
//! axis `(s1, s2, t)`. The space-time kernel is the product of a spatial SE
//! factor carrying the signal variance and a unit-variance temporal SE factor,
//! so `k(x, x) = signal_variance`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An input `x = (s1, s2, t)` shared by both fidelities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint<T> {
    pub s1: T,
    pub s2: T,
    pub t: T,
}

impl<T: Scalar> SpaceTimePoint<T> {
    pub fn new(s1: T, s2: T, t: T) -> Self {
        Self { s1, s2, t }
    }

    pub fn is_finite(&self) -> bool {
        self.s1.is_finite() && self.s2.is_finite() && self.t.is_finite()
    }

    /// Per-axis squared differences `[(Δs1)², (Δs2)², (Δt)²]`.
    #[inline]
    pub fn sq_diff(&self, other: &Self) -> [T; 3] {
        let d1 = self.s1 - other.s1;
        let d2 = self.s2 - other.s2;
        let dt = self.t - other.t;
        [d1 * d1, d2 * d2, dt * dt]
    }
}

/// Hyperparameters of one anisotropic SE process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    pub signal_variance: T,
    pub lengthscale_s1: T,
    pub lengthscale_s2: T,
    pub lengthscale_t: T,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(signal_variance: T, lengthscale_s1: T, lengthscale_s2: T, lengthscale_t: T) -> Self {
        Self { signal_variance, lengthscale_s1, lengthscale_s2, lengthscale_t }
    }

    /// Equal spatial length-scales.
    pub fn isotropic_space(signal_variance: T, lengthscale_s: T, lengthscale_t: T) -> Self {
        Self::new(signal_variance, lengthscale_s, lengthscale_s, lengthscale_t)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("signal_variance", self.signal_variance),
            ("lengthscale_s1", self.lengthscale_s1),
            ("lengthscale_s2", self.lengthscale_s2),
            ("lengthscale_t", self.lengthscale_t),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= T::zero() {
                return Err(Error::InvalidParameter(format!(
                    "kernel {name} must be finite and > 0, got {}",
                    v.as_f64()
                )));
            }
        }
        Ok(())
    }

    /// Covariance between two points.
    #[inline]
    pub fn eval(&self, a: &SpaceTimePoint<T>, b: &SpaceTimePoint<T>) -> T {
        self.eval_sq(a.sq_diff(b))
    }

    #[inline]
    fn eval_sq(&self, d2: [T; 3]) -> T {
        let half = T::of(0.5);
        let q = d2[0] / (self.lengthscale_s1 * self.lengthscale_s1)
            + d2[1] / (self.lengthscale_s2 * self.lengthscale_s2)
            + d2[2] / (self.lengthscale_t * self.lengthscale_t);
        self.signal_variance * (-(half * q)).exp()
    }

    /// Spatial factor only (carries the signal variance).
    #[inline]
    pub fn eval_spatial(&self, a: (T, T), b: (T, T)) -> T {
        let d1 = a.0 - b.0;
        let d2 = a.1 - b.1;
        self.eval_sq([d1 * d1, d2 * d2, T::zero()])
    }

    /// Temporal factor only (unit variance).
    #[inline]
    pub fn eval_temporal(&self, a: T, b: T) -> T {
        let d = (a - b) / self.lengthscale_t;
        (-(T::of(0.5) * d * d)).exp()
    }
}

/// SE covariance from per-axis squared distances.
///
/// Rejects non-finite distances and invalid parameters.
pub fn rbf<T: Scalar>(sq_dist: [T; 3], params: &KernelParams<T>) -> Result<T> {
    params.validate()?;
    if sq_dist.iter().any(|d| !d.is_finite() || *d < T::zero()) {
        return Err(Error::NonFinite("rbf squared distance"));
    }
    Ok(params.eval_sq(sq_dist))
}

/// Dense Gram matrix `K[i, j] = k_s(s_i, s_j) * k_t(t_i, t_j)` between two point lists.
pub fn separable_gram<T: Scalar>(
    points_a: &[SpaceTimePoint<T>],
    points_b: &[SpaceTimePoint<T>],
    params: &KernelParams<T>,
) -> Result<DMatrix<T>> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(Error::EmptyInput("separable_gram point list"));
    }
    params.validate()?;
    if points_a.iter().chain(points_b).any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("separable_gram points"));
    }
    Ok(gram_unchecked(points_a, points_b, params))
}

/// Symmetric Gram on one point set; fills the upper triangle by mirroring.
pub fn symmetric_gram<T: Scalar>(points: &[SpaceTimePoint<T>], params: &KernelParams<T>) -> Result<DMatrix<T>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("symmetric_gram point list"));
    }
    params.validate()?;
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("symmetric_gram points"));
    }
    Ok(symmetric_gram_unchecked(points, params))
}

pub(crate) fn gram_unchecked<T: Scalar>(
    a: &[SpaceTimePoint<T>],
    b: &[SpaceTimePoint<T>],
    params: &KernelParams<T>,
) -> DMatrix<T> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| params.eval(&a[i], &b[j]))
}

pub(crate) fn symmetric_gram_unchecked<T: Scalar>(points: &[SpaceTimePoint<T>], params: &KernelParams<T>) -> DMatrix<T> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = params.signal_variance;
        for i in (j + 1)..n {
            let v = params.eval(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Length-scale giving correlation `c` at distance `d`: `ℓ = d / sqrt(-2 ln c)`.
pub fn lengthscale_from_correlation<T: Scalar>(d: T, c: T) -> Result<T> {
    if !(c > T::zero() && c < T::one()) {
        return Err(Error::InvalidParameter(format!("target correlation must lie in (0, 1), got {}", c.as_f64())));
    }
    if !(d > T::zero()) || !d.is_finite() {
        return Err(Error::InvalidParameter(format!("distance must be finite and > 0, got {}", d.as_f64())));
    }
    Ok(d / (-(T::of(2.0) * c.ln())).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(l: f64) -> KernelParams<f64> {
        KernelParams::new(1.0, l, l, l)
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let p = KernelParams::new(2.0, 0.7, 1.3, 0.1);
        assert_eq!(rbf([0.0, 0.0, 0.0], &p).unwrap(), 2.0);
    }

    #[test]
    fn lengthscale_for_correlation_point_eight() {
        let d = 0.37;
        let l = lengthscale_from_correlation(d, 0.8).unwrap();
        let p = KernelParams::new(1.0, l, 1.0, 1.0);
        assert_relative_eq!(rbf([d * d, 0.0, 0.0], &p).unwrap(), 0.8, max_relative = 1e-14);
    }

    #[test]
    fn distance_equal_lengthscale() {
        let p = unit(2.5);
        assert_relative_eq!(rbf([0.0, 0.0, 2.5 * 2.5], &p).unwrap(), (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!((-0.5f64).exp(), 0.6065306597126334, max_relative = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(rbf([f64::NAN, 0.0, 0.0], &unit(1.0)).is_err());
        assert!(rbf([1.0, 0.0, 0.0], &KernelParams::new(1.0, 0.0, 1.0, 1.0)).is_err());
        assert!(rbf([1.0, 0.0, 0.0], &KernelParams::new(-1.0, 1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn lengthscale_examples() {
        assert_relative_eq!(
            lengthscale_from_correlation(1.0, 0.8).unwrap(),
            1.0 / (-2.0 * 0.8f64.ln()).sqrt(),
            max_relative = 1e-15
        );
        assert_relative_eq!(lengthscale_from_correlation(1.0, 0.8).unwrap(), 1.4970, epsilon = 1e-4);
        assert_relative_eq!(lengthscale_from_correlation(3.2, (-0.5f64).exp()).unwrap(), 3.2, max_relative = 1e-14);
        let dt = 1.0 / 14.0;
        assert_relative_eq!(
            lengthscale_from_correlation(dt, 0.8).unwrap(),
            dt / (-2.0 * 0.8f64.ln()).sqrt(),
            max_relative = 1e-15
        );
        assert!(lengthscale_from_correlation(1.0, 1.0).is_err());
        assert!(lengthscale_from_correlation(1.0, 0.0).is_err());
        assert!(lengthscale_from_correlation(-1.0, 0.5).is_err());
    }

    #[test]
    fn temporal_neighbours_have_target_correlation() {
        let dt = 1.0 / 14.0;
        let lt = lengthscale_from_correlation(dt, 0.8).unwrap();
        let p = KernelParams::new(2.0, 1.0, 1.0, lt);
        let pts = [SpaceTimePoint::new(1.0, 1.0, 0.0), SpaceTimePoint::new(1.0, 1.0, dt)];
        let k = separable_gram(&pts, &pts, &p).unwrap();
        assert_relative_eq!(k[(0, 1)], 0.8 * 2.0, max_relative = 1e-13);
        assert_relative_eq!(k[(0, 0)], 2.0);
    }

    #[test]
    fn gram_matches_brute_force() {
        let p = KernelParams::new(1.7, 0.9, 1.4, 0.3);
        let pts: Vec<_> = (0..3).map(|i| SpaceTimePoint::new(i as f64, 0.5 * i as f64, 0.1 * i as f64)).collect();
        let k = separable_gram(&pts, &pts, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (pts[i], pts[j]);
                let ks = 1.7
                    * (-0.5 * ((a.s1 - b.s1).powi(2) / 0.81 + (a.s2 - b.s2).powi(2) / 1.96)).exp();
                let kt = (-0.5 * (a.t - b.t).powi(2) / 0.09).exp();
                assert_relative_eq!(k[(i, j)], ks * kt, max_relative = 1e-14);
            }
        }
        assert_eq!(symmetric_gram(&pts, &p).unwrap(), k);
    }

    #[test]
    fn works_in_single_precision() {
        let p = KernelParams::<f32>::new(2.0, 1.0, 1.0, 1.0);
        let v = rbf([1.0f32, 0.0, 0.0], &p).unwrap();
        assert!((v - 2.0 * (-0.5f32).exp()).abs() < 1e-6);
    }
}
