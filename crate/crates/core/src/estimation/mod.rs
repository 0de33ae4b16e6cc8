//! Gaussian maximum likelihood, closed-form GLS for `ρ`, and the global Huber estimator.
//!
//! The robust objective whitens the conditional HF residual
//! `e = r_H − E[r_H | r_L] = r_H − ρ B r_L` with the conditional covariance `C`,
//! applies the Huber loss to the whitened components, and adds the LF-marginal
//! Gaussian NLL so that LF-only parameters stay identified:
//!
//! ```text
//! R(Θ) = Σᵢ ρ_δ(r̃ᵢ) + ½ log|W⁻¹| + NLL_L(Θ)
//! ```
//!
//! As `δ → ∞` with full whitening, `R` equals the joint Gaussian NLL.

pub mod huber;
pub mod layout;
pub mod optim;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use huber::{huber_loss, huber_psi, mad_scale, mad_scale_with, median, HUBER_C, MAD_CONSISTENCY};
pub use layout::ParamLayout;
pub use optim::{minimize, numeric_gradient, OptimOutcome, OptimizerSettings, StopReason};

use crate::covariance::{assemble_joint, jittered_cholesky_ctx, ModelParams, WhiteningMode, DEFAULT_JITTER};
use crate::dataset::FidelityDataset;
use crate::error::{Error, Result};
use crate::kernels::symmetric_gram_unchecked;
use crate::likelihood::{decompose_dense, Decomposition, Engine};
use crate::scalar::Scalar;

/// How the Huber threshold `δ` is chosen during a robust fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPolicy<T> {
    /// `δ = c·ŝ` from whitened residuals at the initial parameters, then frozen.
    #[default]
    FixedFromInit,
    /// Re-estimate `δ` from the current fit and refit until `δ` settles.
    RecomputePerIteration,
    /// Use the given threshold.
    Fixed(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct HuberConfig<T> {
    pub c_multiplier: T,
    pub mad_consistency: T,
    pub whitening: WhiteningMode<T>,
    pub delta_policy: DeltaPolicy<T>,
    pub delta_floor: T,
}

impl<T: Scalar> Default for HuberConfig<T> {
    fn default() -> Self {
        Self {
            c_multiplier: T::of(HUBER_C),
            mad_consistency: T::of(MAD_CONSISTENCY),
            whitening: WhiteningMode::Diagonal,
            delta_policy: DeltaPolicy::FixedFromInit,
            delta_floor: T::of(1e-6),
        }
    }
}

impl<T: Scalar> HuberConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_multiplier > T::zero()) || !self.c_multiplier.is_finite() {
            return Err(Error::InvalidParameter("c_multiplier must be > 0".into()));
        }
        if !(self.mad_consistency > T::zero()) || !self.mad_consistency.is_finite() {
            return Err(Error::InvalidParameter("mad_consistency must be > 0".into()));
        }
        if !(self.delta_floor > T::zero()) || !self.delta_floor.is_finite() {
            return Err(Error::InvalidParameter("delta_floor must be > 0".into()));
        }
        if let WhiteningMode::Regularized { lambda } = self.whitening {
            if !(lambda >= T::zero()) || !lambda.is_finite() {
                return Err(Error::InvalidParameter("regularization lambda must be >= 0".into()));
            }
        }
        if let DeltaPolicy::Fixed(d) = self.delta_policy {
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::InvalidParameter("fixed delta must be > 0".into()));
            }
        }
        Ok(())
    }

    /// `δ = c · median|r̃| / consistency`, floored at `delta_floor`.
    pub fn delta_from_residuals(&self, whitened: &[T]) -> Result<T> {
        let s = mad_scale_with(whitened, self.mad_consistency)?;
        Ok((self.c_multiplier * s).max(self.delta_floor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub enum Loss<T> {
    Gaussian,
    Huber(HuberConfig<T>),
}

impl<T: Scalar> Loss<T> {
    pub fn is_robust(&self) -> bool {
        matches!(self, Loss::Huber(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FitOptions {
    pub optimizer: OptimizerSettings,
    pub layout: ParamLayout,
    /// Subtract the empirical mean of each fidelity before fitting.
    pub center: bool,
    /// Always use the dense likelihood route.
    pub force_dense: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub theta_hat: ModelParams<T>,
    pub objective: T,
    pub n_iter: usize,
    pub n_evals: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Huber threshold (robust fits only).
    pub delta_used: Option<T>,
    pub jitter_used: T,
    /// Constant means `(μ_L, μ_H)` removed before fitting (zero unless centering).
    pub mean_offset: (T, T),
}

/// Joint Gaussian NLL `½ log|Σ| + ½ rᵀΣ⁻¹r` (constant omitted).
pub fn gaussian_nll<T: Scalar>(theta: &ModelParams<T>, dataset: &FidelityDataset<T>) -> Result<T> {
    dataset.validate()?;
    Ok(decompose_dense(dataset, theta)?.gaussian_nll())
}

/// LF-marginal Gaussian NLL `½ log|Σ_LL| + ½ r_Lᵀ Σ_LL⁻¹ r_L`.
pub fn identifiability_penalty<T: Scalar>(theta: &ModelParams<T>, dataset: &FidelityDataset<T>) -> Result<T> {
    dataset.validate()?;
    theta.validate()?;
    if dataset.lf.is_empty() {
        return Err(Error::EmptyInput("low-fidelity observations"));
    }
    let mut s = symmetric_gram_unchecked(&dataset.lf.points, &theta.kernel_l);
    for i in 0..s.nrows() {
        s[(i, i)] += theta.tau_l_sq;
    }
    let chol = jittered_cholesky_ctx(&s, T::of(DEFAULT_JITTER), "LF covariance")?;
    let z = chol.solve_lower(&DVector::from_column_slice(&dataset.lf.values));
    let half = T::of(0.5);
    Ok(half * chol.log_det() + half * z.norm_squared())
}

/// Quantities of the conditional HF regression `r_H = ρ B r_L + η`, `η ~ N(0, Ω)`.
#[derive(Debug, Clone)]
pub struct ConditionalRegression<T: Scalar> {
    /// `B r_L`.
    pub b_rl: DVector<T>,
    /// `Ω⁻¹ B r_L`.
    pub omega_inv_b_rl: DVector<T>,
    pub r_h: DVector<T>,
    /// `½ log|Ω|`.
    pub omega_half_logdet: T,
    omega_chol: crate::covariance::JitteredCholesky<T>,
}

impl<T: Scalar> ConditionalRegression<T> {
    /// `B` and `Ω` depend only on the non-`ρ` parameters of `theta`.
    pub fn new(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> Result<Self> {
        let blocks = assemble_joint(dataset, theta)?;
        let r_l = DVector::from_column_slice(&dataset.lf.values);
        let r_h = DVector::from_column_slice(&dataset.hf.values);
        Self::from_parts(&blocks.b, &blocks.omega, &r_l, r_h)
    }

    /// Builds the regression from explicit `B`, `Ω` and residuals.
    pub fn from_parts(b: &DMatrix<T>, omega: &DMatrix<T>, r_l: &DVector<T>, r_h: DVector<T>) -> Result<Self> {
        if b.ncols() != r_l.len() || b.nrows() != r_h.len() || omega.nrows() != r_h.len() {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{}, Omega {}x{}, r_L {}, r_H {}",
                b.nrows(),
                b.ncols(),
                omega.nrows(),
                omega.ncols(),
                r_l.len(),
                r_h.len()
            )));
        }
        let b_rl = b * r_l;
        let omega_chol = jittered_cholesky_ctx(omega, T::of(DEFAULT_JITTER), "HF innovation covariance")?;
        let omega_inv_b_rl = omega_chol.solve(&b_rl);
        let omega_half_logdet = T::of(0.5) * omega_chol.log_det();
        Ok(Self { b_rl, omega_inv_b_rl, r_h, omega_half_logdet, omega_chol })
    }

    /// `(L_Ω⁻¹ r_H, L_Ω⁻¹ B r_L)`: the regression in whitened coordinates.
    pub fn whitened(&self) -> (DVector<T>, DVector<T>) {
        (self.omega_chol.solve_lower(&self.r_h), self.omega_chol.solve_lower(&self.b_rl))
    }

    /// `r_Lᵀ Bᵀ Ω⁻¹ B r_L`.
    pub fn information(&self) -> T {
        self.b_rl.dot(&self.omega_inv_b_rl)
    }

    /// `r_Lᵀ Bᵀ Ω⁻¹ r_H / r_Lᵀ Bᵀ Ω⁻¹ B r_L`.
    pub fn gls(&self) -> Result<T> {
        let den = self.b_rl.dot(&self.omega_inv_b_rl);
        if !(den > T::zero()) || !den.is_finite() {
            return Err(Error::Degenerate("r_L lies in the null space of B (zero GLS denominator)".into()));
        }
        let rho = self.omega_inv_b_rl.dot(&self.r_h) / den;
        if !rho.is_finite() {
            return Err(Error::NonFinite("GLS estimate"));
        }
        Ok(rho)
    }

    /// `(r_H − ρ B r_L)ᵀ Ω⁻¹ B r_L`.
    pub fn score(&self, rho: T) -> T {
        (&self.r_h - &self.b_rl * rho).dot(&self.omega_inv_b_rl)
    }

    /// `½ log|Ω| + ½ (r_H − ρ B r_L)ᵀ Ω⁻¹ (r_H − ρ B r_L)`.
    pub fn nll(&self, rho: T) -> T {
        let resid = &self.r_h - &self.b_rl * rho;
        let z = self.omega_chol.solve_lower(&resid);
        self.omega_half_logdet + T::of(0.5) * z.norm_squared()
    }
}

/// Closed-form GLS estimate of `ρ` with every other parameter held at `theta`.
pub fn gls_rho<T: Scalar>(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> Result<T> {
    ConditionalRegression::new(dataset, theta)?.gls()
}

/// Whitened conditional HF residuals and the matching `½ log|W⁻¹|` term.
pub fn whitened_residuals<T: Scalar>(dec: &Decomposition<T>, mode: WhiteningMode<T>) -> Result<(DVector<T>, T)> {
    let half = T::of(0.5);
    match mode {
        WhiteningMode::Diagonal => {
            let mut out = DVector::zeros(dec.hf_residual.len());
            let mut logdet = T::zero();
            for i in 0..out.len() {
                let v = dec.hf_cond_var[i];
                if !(v > T::zero()) || !v.is_finite() {
                    return Err(Error::Degenerate(format!("non-positive conditional variance at HF row {i}")));
                }
                out[i] = dec.hf_residual[i] / v.sqrt();
                logdet += v.ln();
            }
            Ok((out, half * logdet))
        }
        WhiteningMode::Full => {
            let r = dec.hf_whitened_full().ok_or_else(|| {
                Error::InvalidParameter("full whitening needs the dense conditional factor".into())
            })?;
            Ok((r, dec.hf_half_logdet))
        }
        WhiteningMode::Regularized { lambda } => {
            let l = dec.hf_cond_chol.as_ref().ok_or_else(|| {
                Error::InvalidParameter("regularized whitening needs the dense conditional factor".into())
            })?;
            let mut c: DMatrix<T> = l * l.transpose();
            for i in 0..c.nrows() {
                c[(i, i)] += lambda;
            }
            let chol = jittered_cholesky_ctx(&c, T::of(DEFAULT_JITTER), "regularized HF covariance")?;
            Ok((chol.solve_lower(&dec.hf_residual), half * chol.log_det()))
        }
    }
}

/// `Σᵢ ρ_δ(r̃ᵢ)`.
pub fn huber_sum<T: Scalar>(whitened: &DVector<T>, delta: T) -> T {
    whitened.iter().fold(T::zero(), |acc, &r| acc + huber_loss(r, delta))
}

/// Huber loss of the whitened conditional HF residuals at `theta`.
///
/// `delta = None` resolves the threshold from the residuals themselves.
pub fn huber_objective<T: Scalar>(
    theta: &ModelParams<T>,
    dataset: &FidelityDataset<T>,
    config: &HuberConfig<T>,
    delta: Option<T>,
) -> Result<T> {
    config.validate()?;
    let dec = decompose_dense(dataset, theta)?;
    let (r, _) = whitened_residuals(&dec, config.whitening)?;
    let delta = match (delta, config.delta_policy) {
        (Some(d), _) | (None, DeltaPolicy::Fixed(d)) => d,
        (None, _) => config.delta_from_residuals(r.as_slice())?,
    };
    Ok(huber_sum(&r, delta))
}

/// Components of the total robust objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustTerms<T> {
    pub huber: T,
    /// `½ log|W⁻¹|` for the active whitening mode.
    pub whitening_logdet: T,
    /// LF-marginal NLL.
    pub penalty: T,
    pub jitter: T,
}

impl<T: Scalar> RobustTerms<T> {
    pub fn total(&self) -> T {
        self.huber + self.whitening_logdet + self.penalty
    }
}

pub fn robust_terms<T: Scalar>(dec: &Decomposition<T>, mode: WhiteningMode<T>, delta: T) -> Result<RobustTerms<T>> {
    let (r, logdet) = whitened_residuals(dec, mode)?;
    Ok(RobustTerms { huber: huber_sum(&r, delta), whitening_logdet: logdet, penalty: dec.lf_nll(), jitter: dec.jitter })
}

/// Total robust objective at `theta` for threshold `delta`.
pub fn robust_objective<T: Scalar>(
    theta: &ModelParams<T>,
    dataset: &FidelityDataset<T>,
    mode: WhiteningMode<T>,
    delta: T,
) -> Result<T> {
    let dec = decompose_dense(dataset, theta)?;
    Ok(robust_terms(&dec, mode, delta)?.total())
}

/// Starting values from the data: variance splits of each fidelity, the median
/// inter-station distance as spatial length-scale and a tenth of the time span
/// as temporal length-scale.
pub fn heuristic_init(dataset: &FidelityDataset<f64>) -> Result<ModelParams<f64>> {
    dataset.require_both()?;
    let var = |v: Option<f64>| v.map(|s| s * s).filter(|s| *s > 0.0).unwrap_or(1.0);
    let (var_l, var_h) = (var(dataset.lf.sd()), var(dataset.hf.sd()));
    let used: Vec<usize> = {
        let mut s = dataset.lf.station_set();
        s.extend(dataset.hf.station_set());
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut dists = Vec::new();
    for (a, &i) in used.iter().enumerate() {
        for &j in &used[a + 1..] {
            let (p, q) = (&dataset.stations[i], &dataset.stations[j]);
            let d = ((p.s1 - q.s1).powi(2) + (p.s2 - q.s2).powi(2)).sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    let ell_s = if dists.is_empty() { 1.0 } else { median(&dists)? };
    let times = dataset.lf.points.iter().chain(&dataset.hf.points).map(|p| p.t);
    let (t0, t1) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let ell_t = if t1 > t0 { (t1 - t0) / 10.0 } else { 1.0 };
    let rho = 0.5;
    let sigma_l = 0.8 * var_l;
    let sigma_d = (var_h - rho * rho * sigma_l).max(0.1 * var_h) * 0.8;
    Ok(ModelParams {
        rho,
        kernel_l: crate::kernels::KernelParams::new(sigma_l, ell_s, ell_s, ell_t),
        kernel_delta: crate::kernels::KernelParams::new(sigma_d, ell_s, ell_s, ell_t),
        tau_l_sq: 0.2 * var_l,
        tau_h_sq: 0.1 * var_h,
    })
}

fn needs_dense<T: Scalar>(loss: &Loss<T>) -> bool {
    matches!(loss, Loss::Huber(c) if c.whitening != WhiteningMode::Diagonal)
}

fn resolve_initial_delta<T: Scalar>(
    engine: &Engine<T>,
    data: &FidelityDataset<T>,
    theta: &ModelParams<T>,
    cfg: &HuberConfig<T>,
) -> Result<T> {
    match cfg.delta_policy {
        DeltaPolicy::Fixed(d) => Ok(d),
        _ => {
            let dec = engine.decompose(data, theta, cfg.whitening != WhiteningMode::Diagonal)?;
            let (r, _) = whitened_residuals(&dec, cfg.whitening)?;
            cfg.delta_from_residuals(r.as_slice())
        }
    }
}

struct Run<T: Scalar> {
    outcome: OptimOutcome<T>,
    jitter: T,
}

fn run_once<T: Scalar>(
    engine: &Engine<T>,
    data: &FidelityDataset<T>,
    loss: &Loss<T>,
    delta: T,
    x0: DVector<T>,
    opts: &FitOptions,
) -> Result<Run<T>> {
    let layout = opts.layout;
    let dense = needs_dense(loss);
    let eval = |x: &DVector<T>| -> Result<(T, T)> {
        let theta = layout.decode(x);
        let dec = engine.decompose(data, &theta, dense)?;
        match loss {
            Loss::Gaussian => Ok((dec.gaussian_nll(), dec.jitter)),
            Loss::Huber(cfg) => {
                let t = robust_terms(&dec, cfg.whitening, delta)?;
                Ok((t.total(), t.jitter))
            }
        }
    };
    eval(&x0)?;
    let outcome = minimize(|x| eval(x).ok().map(|v| v.0), x0, &opts.optimizer)?;
    let (_, jitter) = eval(&outcome.x)?;
    Ok(Run { outcome, jitter })
}

/// Minimizes the Gaussian NLL or the robust objective from `init`.
pub fn fit<T: Scalar>(
    dataset: &FidelityDataset<T>,
    init: &ModelParams<T>,
    loss: &Loss<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    dataset.validate()?;
    dataset.require_both()?;
    init.validate()?;
    if let Loss::Huber(cfg) = loss {
        cfg.validate()?;
    }
    let (data, mean_offset) = if opts.center {
        dataset.centered()
    } else {
        (dataset.clone(), (T::zero(), T::zero()))
    };
    let engine = if opts.force_dense { Engine::Dense } else { Engine::auto(&data) };
    let x0 = opts.layout.encode(init);
    let theta0 = opts.layout.decode(&x0);

    let (run, delta_used) = match loss {
        Loss::Gaussian => (run_once(&engine, &data, loss, T::zero(), x0, opts)?, None),
        Loss::Huber(cfg) => {
            let mut delta = resolve_initial_delta(&engine, &data, &theta0, cfg)?;
            let mut run = run_once(&engine, &data, loss, delta, x0, opts)?;
            if cfg.delta_policy == DeltaPolicy::RecomputePerIteration {
                for _ in 0..10 {
                    let theta = opts.layout.decode(&run.outcome.x);
                    let next = resolve_initial_delta(&engine, &data, &theta, cfg)?;
                    let settled = (next - delta).abs() <= T::of(1e-3) * delta;
                    delta = next;
                    let iters = run.outcome.iters;
                    run = run_once(&engine, &data, loss, delta, run.outcome.x.clone(), opts)?;
                    run.outcome.iters += iters;
                    if settled {
                        break;
                    }
                }
            }
            (run, Some(delta))
        }
    };

    Ok(FitResult {
        theta_hat: opts.layout.decode(&run.outcome.x),
        objective: run.outcome.f,
        n_iter: run.outcome.iters,
        n_evals: run.outcome.n_evals,
        converged: run.outcome.converged,
        stop_reason: run.outcome.reason,
        delta_used,
        jitter_used: run.jitter,
        mean_offset,
    })
}
