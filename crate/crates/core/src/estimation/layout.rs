//! Unconstrained parameterization of [`ModelParams`].
//!
//! `ρ` stays on the real line; variances and length-scales are optimized on
//! the log scale. Optional ties reduce the free set: equal spatial
//! length-scales per process, and one temporal length-scale shared by the LF
//! and discrepancy processes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covariance::ModelParams;
use crate::kernels::KernelParams;
use crate::scalar::Scalar;

/// Smallest noise variance representable on the log scale.
pub const MIN_NOISE_VARIANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ParamLayout {
    /// `ℓ_s1 = ℓ_s2` within each process.
    pub tie_spatial: bool,
    /// `ℓ_t` shared by the LF and discrepancy kernels.
    pub share_temporal: bool,
}

impl ParamLayout {
    pub const FULL: ParamLayout = ParamLayout { tie_spatial: false, share_temporal: false };

    pub fn dim(&self) -> usize {
        self.names().len()
    }

    /// Coordinate names in vector order.
    pub fn names(&self) -> Vec<&'static str> {
        let mut n = vec!["rho", "log_sigma2_l", "log_ell_s1_l"];
        if !self.tie_spatial {
            n.push("log_ell_s2_l");
        }
        n.push("log_ell_t_l");
        n.push("log_sigma2_delta");
        n.push("log_ell_s1_delta");
        if !self.tie_spatial {
            n.push("log_ell_s2_delta");
        }
        if !self.share_temporal {
            n.push("log_ell_t_delta");
        }
        n.push("log_tau2_l");
        n.push("log_tau2_h");
        n
    }

    /// Index of `ρ` in the vector.
    pub const RHO: usize = 0;

    /// Projects `theta` onto the layout (averaging tied length-scales) and encodes it.
    pub fn encode<T: Scalar>(&self, theta: &ModelParams<T>) -> DVector<T> {
        let half = T::of(0.5);
        let floor = T::of(MIN_NOISE_VARIANCE);
        let kl = &theta.kernel_l;
        let kd = &theta.kernel_delta;
        let mut v = vec![theta.rho, kl.signal_variance.ln()];
        if self.tie_spatial {
            v.push(half * (kl.lengthscale_s1.ln() + kl.lengthscale_s2.ln()));
        } else {
            v.push(kl.lengthscale_s1.ln());
            v.push(kl.lengthscale_s2.ln());
        }
        if self.share_temporal {
            v.push(half * (kl.lengthscale_t.ln() + kd.lengthscale_t.ln()));
        } else {
            v.push(kl.lengthscale_t.ln());
        }
        v.push(kd.signal_variance.ln());
        if self.tie_spatial {
            v.push(half * (kd.lengthscale_s1.ln() + kd.lengthscale_s2.ln()));
        } else {
            v.push(kd.lengthscale_s1.ln());
            v.push(kd.lengthscale_s2.ln());
        }
        if !self.share_temporal {
            v.push(kd.lengthscale_t.ln());
        }
        v.push(theta.tau_l_sq.max(floor).ln());
        v.push(theta.tau_h_sq.max(floor).ln());
        DVector::from_vec(v)
    }

    pub fn decode<T: Scalar>(&self, x: &DVector<T>) -> ModelParams<T> {
        debug_assert_eq!(x.len(), self.dim());
        let mut it = x.iter().copied();
        let mut next = || it.next().expect("layout dimension");
        let rho = next();
        let sl = next().exp();
        let l1 = next().exp();
        let l2 = if self.tie_spatial { l1 } else { next().exp() };
        let lt = next().exp();
        let sd = next().exp();
        let d1 = next().exp();
        let d2 = if self.tie_spatial { d1 } else { next().exp() };
        let dt = if self.share_temporal { lt } else { next().exp() };
        let tau_l = next().exp();
        let tau_h = next().exp();
        ModelParams {
            rho,
            kernel_l: KernelParams::new(sl, l1, l2, lt),
            kernel_delta: KernelParams::new(sd, d1, d2, dt),
            tau_l_sq: tau_l,
            tau_h_sq: tau_h,
        }
    }
}
