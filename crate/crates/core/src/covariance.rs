//! Joint two-fidelity covariance, conditional-regression operators and whitening.
//!
//! With LF inputs `x_L`, HF inputs `x_H` and stacked response `y = [y_L; y_H]`:
//!
//! ```text
//! Σ = | K_L(x_L,x_L) + τ_L² I      ρ K_L(x_L,x_H)                          |
//!     | ρ K_L(x_H,x_L)             ρ² K_L(x_H,x_H) + K_δ(x_H,x_H) + τ_H² I |
//! ```
//!
//! `B = K_L(x_H,x_L) Σ_LL⁻¹` maps LF residuals to the conditional HF mean
//! and `Ω = K_δ + τ_H² I` is the HF innovation covariance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::FidelityDataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_unchecked, symmetric_gram_unchecked, KernelParams};
use crate::scalar::Scalar;

/// Default starting jitter of the escalation ladder.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Number of ×10 escalations after `eps0` (1e-8 → 1e-2).
pub const JITTER_ESCALATIONS: i32 = 6;

/// Full parameter vector `Θ = {ρ, θ_L, θ_δ, τ_L², τ_H²}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub rho: T,
    pub kernel_l: KernelParams<T>,
    pub kernel_delta: KernelParams<T>,
    pub tau_l_sq: T,
    pub tau_h_sq: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() {
            return Err(Error::InvalidParameter("rho must be finite".into()));
        }
        self.kernel_l.validate()?;
        self.kernel_delta.validate()?;
        for (name, v) in [("tau_l_sq", self.tau_l_sq), ("tau_h_sq", self.tau_h_sq)] {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {}", v.as_f64())));
            }
        }
        Ok(())
    }

    /// Prior variance of the latent HF process, `ρ²σ_L² + σ_δ²`.
    pub fn hf_prior_variance(&self) -> T {
        self.rho * self.rho * self.kernel_l.signal_variance + self.kernel_delta.signal_variance
    }
}

/// Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky<T: Scalar> {
    pub factor: Cholesky<T, Dyn>,
    pub jitter: T,
}

impl<T: Scalar> JitteredCholesky<T> {
    pub fn l(&self) -> DMatrix<T> {
        self.factor.l()
    }

    /// `log |M + εI|`.
    pub fn log_det(&self) -> T {
        let l = self.factor.l_dirty();
        let mut acc = T::zero();
        for i in 0..l.nrows() {
            acc += l[(i, i)].ln();
        }
        acc + acc
    }

    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        self.factor.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<T>) -> DVector<T> {
        self.factor.l_dirty().solve_lower_triangular(b).expect("non-singular Cholesky factor")
    }

    pub fn solve_lower_mat(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.factor.l_dirty().solve_lower_triangular(b).expect("non-singular Cholesky factor")
    }
}

/// Factorizes `M + εI` for the smallest `ε` in `{0, eps0, 10·eps0, …, 10⁶·eps0}` that succeeds.
pub fn jittered_cholesky<T: Scalar>(m: &DMatrix<T>, eps0: T) -> Result<JitteredCholesky<T>> {
    jittered_cholesky_ctx(m, eps0, "jittered_cholesky")
}

pub(crate) fn jittered_cholesky_ctx<T: Scalar>(
    m: &DMatrix<T>,
    eps0: T,
    context: &'static str,
) -> Result<JitteredCholesky<T>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("{context}: matrix is {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context));
    }
    let ten = T::of(10.0);
    let mut eps = T::zero();
    for step in 0..=(JITTER_ESCALATIONS + 1) {
        if step == 1 {
            eps = eps0;
        } else if step > 1 {
            eps *= ten;
        }
        let mut a = m.clone();
        if eps > T::zero() {
            for i in 0..a.nrows() {
                a[(i, i)] += eps;
            }
        }
        if let Some(factor) = Cholesky::new(a) {
            let l = factor.l_dirty();
            if (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > T::zero()) {
                return Ok(JitteredCholesky { factor, jitter: eps });
            }
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: eps.as_f64(), context })
}

/// How HF residuals are standardized before the Huber loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum WhiteningMode<T> {
    /// `diag(1/sqrt(Σ_ii))`.
    #[default]
    Diagonal,
    /// Inverse Cholesky factor, `TᵀT = Σ⁻¹`.
    Full,
    /// Inverse Cholesky factor of `Σ + λI`.
    Regularized { lambda: T },
}

impl<T: Scalar> fmt::Display for WhiteningMode<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WhiteningMode::Diagonal => write!(f, "diag"),
            WhiteningMode::Full => write!(f, "full"),
            WhiteningMode::Regularized { lambda } => write!(f, "reg:{}", lambda.as_f64()),
        }
    }
}

impl<T: Scalar> FromStr for WhiteningMode<T> {
    type Err = Error;

    /// Accepts `diag`, `full` or `reg:<lambda>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "diag" | "diagonal" => Ok(WhiteningMode::Diagonal),
            "full" => Ok(WhiteningMode::Full),
            other => {
                let lam = other
                    .strip_prefix("reg:")
                    .ok_or_else(|| Error::Parse(format!("unknown whitening mode '{other}'")))?;
                let v: f64 = lam.parse().map_err(|_| Error::Parse(format!("bad lambda '{lam}'")))?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Parse(format!("lambda must be >= 0, got {v}")));
                }
                Ok(WhiteningMode::Regularized { lambda: T::of(v) })
            }
        }
    }
}

/// Root `T` of the (approximate) precision of a symmetric positive-definite `sigma`.
pub fn whitening_root<T: Scalar>(sigma: &DMatrix<T>, mode: WhiteningMode<T>) -> Result<DMatrix<T>> {
    let n = sigma.nrows();
    if n == 0 || !sigma.is_square() {
        return Err(Error::DimensionMismatch("whitening_root needs a non-empty square matrix".into()));
    }
    match mode {
        WhiteningMode::Diagonal => {
            let mut t = DMatrix::zeros(n, n);
            for i in 0..n {
                let v = sigma[(i, i)];
                if !(v > T::zero()) || !v.is_finite() {
                    return Err(Error::Degenerate(format!("non-positive variance {} at index {i}", v.as_f64())));
                }
                t[(i, i)] = T::one() / v.sqrt();
            }
            Ok(t)
        }
        WhiteningMode::Full => inverse_lower(sigma, T::zero()),
        WhiteningMode::Regularized { lambda } => inverse_lower(sigma, lambda),
    }
}

fn inverse_lower<T: Scalar>(sigma: &DMatrix<T>, lambda: T) -> Result<DMatrix<T>> {
    let mut a = sigma.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = jittered_cholesky_ctx(&a, T::of(DEFAULT_JITTER), "HF whitening block")?;
    let n = a.nrows();
    Ok(chol.solve_lower_mat(&DMatrix::identity(n, n)))
}

/// Dense covariance blocks of the joint model at a dataset's input locations.
#[derive(Debug, Clone)]
pub struct CovarianceBlocks<T: Scalar> {
    /// LF kernel at LF inputs (noise free), `n_L × n_L`.
    pub k_ll: DMatrix<T>,
    /// Discrepancy kernel at HF inputs, `n_H × n_H`.
    pub k_delta: DMatrix<T>,
    /// LF kernel at HF inputs, `n_H × n_H`.
    pub k_ll_hh: DMatrix<T>,
    /// LF kernel between LF and HF inputs, `n_L × n_H`.
    pub k_lh: DMatrix<T>,
    /// Joint covariance of `[y_L; y_H]`.
    pub sigma: DMatrix<T>,
    /// `K_L(x_H, x_L) Σ_LL⁻¹`, `n_H × n_L`.
    pub b: DMatrix<T>,
    /// `K_δ + τ_H² I`.
    pub omega: DMatrix<T>,
    /// Jitter needed to factor `sigma`.
    pub jitter: T,
    pub rho: T,
    pub tau_l_sq: T,
    pub tau_h_sq: T,
}

impl<T: Scalar> CovarianceBlocks<T> {
    pub fn n_lf(&self) -> usize {
        self.k_ll.nrows()
    }

    pub fn n_hf(&self) -> usize {
        self.k_delta.nrows()
    }

    /// `Σ_LL = K_LL + τ_L² I`.
    pub fn sigma_ll(&self) -> DMatrix<T> {
        self.sigma.view((0, 0), (self.n_lf(), self.n_lf())).into_owned()
    }

    /// HF marginal block `ρ² K_L(x_H,x_H) + K_δ + τ_H² I`.
    pub fn sigma_hh(&self) -> DMatrix<T> {
        let nl = self.n_lf();
        let nh = self.n_hf();
        self.sigma.view((nl, nl), (nh, nh)).into_owned()
    }

    /// Whitening operator for the HF marginal block.
    pub fn whitening_root(&self, mode: WhiteningMode<T>) -> Result<DMatrix<T>> {
        whitening_root(&self.sigma_hh(), mode)
    }
}

/// Builds every block of the joint covariance and checks positive definiteness.
pub fn assemble_joint<T: Scalar>(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> Result<CovarianceBlocks<T>> {
    dataset.validate()?;
    dataset.require_both()?;
    theta.validate()?;
    let xl = &dataset.lf.points;
    let xh = &dataset.hf.points;
    let (nl, nh) = (xl.len(), xh.len());
    let rho = theta.rho;

    let k_ll = symmetric_gram_unchecked(xl, &theta.kernel_l);
    let k_ll_hh = symmetric_gram_unchecked(xh, &theta.kernel_l);
    let k_lh = gram_unchecked(xl, xh, &theta.kernel_l);
    let k_delta = symmetric_gram_unchecked(xh, &theta.kernel_delta);

    let mut omega = k_delta.clone();
    for i in 0..nh {
        omega[(i, i)] += theta.tau_h_sq;
    }

    let n = nl + nh;
    let mut sigma = DMatrix::zeros(n, n);
    {
        let mut ll = sigma.view_mut((0, 0), (nl, nl));
        ll.copy_from(&k_ll);
        for i in 0..nl {
            ll[(i, i)] += theta.tau_l_sq;
        }
    }
    sigma.view_mut((0, nl), (nl, nh)).copy_from(&(&k_lh * rho));
    sigma.view_mut((nl, 0), (nh, nl)).copy_from(&(k_lh.transpose() * rho));
    sigma.view_mut((nl, nl), (nh, nh)).copy_from(&(&k_ll_hh * (rho * rho) + &omega));

    let joint = jittered_cholesky_ctx(&sigma, T::of(DEFAULT_JITTER), "joint covariance")?;

    let sigma_ll = sigma.view((0, 0), (nl, nl)).into_owned();
    let ll_chol = jittered_cholesky_ctx(&sigma_ll, T::of(DEFAULT_JITTER), "LF covariance")?;
    // B = K_HL Σ_LL⁻¹ = (Σ_LL⁻¹ K_LH)ᵀ
    let b = ll_chol.factor.solve(&k_lh).transpose();

    Ok(CovarianceBlocks {
        k_ll,
        k_delta,
        k_ll_hh,
        k_lh,
        sigma,
        b,
        omega,
        jitter: joint.jitter,
        rho,
        tau_l_sq: theta.tau_l_sq,
        tau_h_sq: theta.tau_h_sq,
    })
}
