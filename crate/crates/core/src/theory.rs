//! Numerical checks of attenuation under LF contamination and of Gaussian vs.
//! Huber influence.
//!
//! The robust score is `S(Θ) = Σᵢ ψ_δ(r̃ᵢ(Θ)) gᵢ(Θ)` with `r̃ = W^{1/2} e` the
//! whitened conditional HF residual and `gᵢ = ∂r̃ᵢ/∂Θ`. Derivatives are central
//! differences on the unconstrained parameter scale of [`ParamLayout`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{jittered_cholesky_ctx, whitening_root, ModelParams, WhiteningMode, DEFAULT_JITTER};
use crate::dataset::FidelityDataset;
use crate::error::{Error, Result};
use crate::estimation::{
    huber_loss, huber_psi, huber_sum, minimize, ConditionalRegression, DeltaPolicy, HuberConfig, OptimizerSettings,
    ParamLayout,
};
use crate::likelihood::{decompose_dense, Decomposition};
use crate::scalar::Scalar;
use crate::simulation::{ContaminationSpec, EstimatorKind};

/// `s_ρ = (r_H − ρ B r_L)ᵀ Ω⁻¹ B r_L` at `theta`.
pub fn score_rho<T: Scalar>(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> Result<T> {
    Ok(ConditionalRegression::new(dataset, theta)?.score(theta.rho))
}

/// Attenuated limit `ρ* = κρ` of the Gaussian estimator when the LF residuals
/// carry additive contamination with covariance `sigma_u`.
///
/// `κ = tr(M C_L) / tr(M (C_L + Σ_u))` with `M = Bᵀ Ω⁻¹ B`. Returns `(ρ*, κ)`.
pub fn pseudo_true_rho<T: Scalar>(
    c_l: &DMatrix<T>,
    sigma_u: &DMatrix<T>,
    b: &DMatrix<T>,
    omega: &DMatrix<T>,
    rho: T,
) -> Result<(T, T)> {
    let (nh, nl) = b.shape();
    if c_l.shape() != (nl, nl) || sigma_u.shape() != (nl, nl) || omega.shape() != (nh, nh) {
        return Err(Error::DimensionMismatch(format!(
            "B is {nh}x{nl}, C_L {:?}, Sigma_u {:?}, Omega {:?}",
            c_l.shape(),
            sigma_u.shape(),
            omega.shape()
        )));
    }
    let chol = jittered_cholesky_ctx(omega, T::of(DEFAULT_JITTER), "HF innovation covariance")?;
    let m = b.transpose() * chol.factor.solve(b);
    let num = trace_of_product(&m, c_l);
    let den = num + trace_of_product(&m, sigma_u);
    if !(num > T::zero()) || !(den > T::zero()) || !den.is_finite() {
        return Err(Error::Degenerate("zero trace in the attenuation factor".into()));
    }
    let kappa = num / den;
    Ok((kappa * rho, kappa))
}

/// `tr(A B)` without forming the product.
fn trace_of_product<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Huber M-estimate of `ρ` in the conditional regression, whitened by `Ω`.
///
/// `δ` comes from the MAD of the residuals at the GLS estimate unless the
/// policy fixes it. Returns `(ρ̂, δ)`.
pub fn huber_rho<T: Scalar>(reg: &ConditionalRegression<T>, config: &HuberConfig<T>) -> Result<(T, T)> {
    config.validate()?;
    let (z, w) = reg.whitened();
    let mut rho = reg.gls()?;
    let resid = |rho: T| &z - &w * rho;
    let mut delta = match config.delta_policy {
        DeltaPolicy::Fixed(d) => d,
        _ => config.delta_from_residuals(resid(rho).as_slice())?,
    };
    let rounds = if config.delta_policy == DeltaPolicy::RecomputePerIteration { 10 } else { 1 };
    for _ in 0..rounds {
        rho = irls_rho(&z, &w, rho, delta)?;
        if rounds == 1 {
            break;
        }
        let next = config.delta_from_residuals(resid(rho).as_slice())?;
        let settled = (next - delta).abs() <= T::of(1e-3) * delta;
        delta = next;
        if settled {
            break;
        }
    }
    Ok((rho, delta))
}

fn irls_rho<T: Scalar>(z: &DVector<T>, w: &DVector<T>, start: T, delta: T) -> Result<T> {
    let mut rho = start;
    for _ in 0..500 {
        let mut num = T::zero();
        let mut den = T::zero();
        for (&zi, &wi) in z.iter().zip(w.iter()) {
            let r = (zi - rho * wi).abs();
            let weight = if r <= delta { T::one() } else { delta / r };
            num += weight * wi * zi;
            den += weight * wi * wi;
        }
        if !(den > T::zero()) {
            return Err(Error::Degenerate("all regression weights vanished".into()));
        }
        let next = num / den;
        let done = (next - rho).abs() <= T::of(1e-12) * (T::one() + rho.abs());
        rho = next;
        if done {
            return Ok(rho);
        }
    }
    Ok(rho)
}

/// `−ρ (B 1_I)ᵀ Ω⁻¹ (B 1_I)` for the LF rows flagged in `mask`: the leading
/// coefficient of `s_ρ` in `Δ²` when `Δ` is added to those rows.
pub fn shift_score_coefficient(dataset: &FidelityDataset<f64>, theta: &ModelParams<f64>, mask: &[bool]) -> Result<f64> {
    if mask.len() != dataset.n_lf() {
        return Err(Error::DimensionMismatch(format!("mask has {} rows, LF has {}", mask.len(), dataset.n_lf())));
    }
    let indicator = DVector::from_iterator(mask.len(), mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    let blocks = crate::covariance::assemble_joint(dataset, theta)?;
    let reg = ConditionalRegression::from_parts(&blocks.b, &blocks.omega, &indicator, DVector::zeros(dataset.n_hf()))?;
    Ok(-theta.rho * reg.information())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WhiteningRegime {
    /// `W` is re-evaluated at every `Θ`.
    #[default]
    #[serde(rename = "general_whitening")]
    General,
    /// `W` is frozen at the reference parameters.
    #[serde(rename = "fixed_whitening")]
    Fixed,
}

impl WhiteningRegime {
    pub fn label(&self) -> &'static str {
        match self {
            WhiteningRegime::General => "general_whitening",
            WhiteningRegime::Fixed => "fixed_whitening",
        }
    }
}

impl std::str::FromStr for WhiteningRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "general" | "general_whitening" => Ok(WhiteningRegime::General),
            "fixed" | "fixed_whitening" => Ok(WhiteningRegime::Fixed),
            other => Err(Error::Parse(format!("unknown whitening regime '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub huber: HuberConfig<f64>,
    pub regime: WhiteningRegime,
    pub layout: ParamLayout,
    /// Layout coordinates treated as free; the rest stay at the reference values.
    pub params: Vec<usize>,
    /// Step for `gᵢ` and `∂μ_H/∂Θ`.
    pub fd_step: f64,
    /// Step for the Jacobian of `S`.
    pub jacobian_step: f64,
    /// Parameter draws used for the Lipschitz constants of the general regime.
    pub box_samples: usize,
    /// Box half-width: factors in `[1/(1+w), 1+w]` on positive parameters, `ρ(1 ± w)` on `ρ`.
    pub box_half_width: f64,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            huber: HuberConfig::default(),
            regime: WhiteningRegime::General,
            layout: ParamLayout::FULL,
            params: vec![ParamLayout::RHO],
            fd_step: 1e-5,
            jacobian_step: 1e-4,
            box_samples: 32,
            box_half_width: 0.5,
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        self.huber.validate()?;
        let dim = self.layout.dim();
        if self.params.is_empty() {
            return Err(Error::InvalidParameter("at least one free parameter is required".into()));
        }
        if let Some(&i) = self.params.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidParameter(format!("parameter index {i} outside layout of size {dim}")));
        }
        let mut sorted = self.params.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.params.len() {
            return Err(Error::InvalidParameter("duplicate free parameter".into()));
        }
        for (name, v) in [("fd_step", self.fd_step), ("jacobian_step", self.jacobian_step)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        if !(self.box_half_width > 0.0 && self.box_half_width < 1.0) {
            return Err(Error::InvalidParameter("box_half_width must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Whitened residual map `Θ ↦ r̃(Θ)` over a subset of layout coordinates.
#[derive(Clone)]
struct ResidualMap<'a> {
    data: &'a FidelityDataset<f64>,
    layout: ParamLayout,
    base: DVector<f64>,
    params: Vec<usize>,
    mode: WhiteningMode<f64>,
    fixed_root: Option<DMatrix<f64>>,
}

impl<'a> ResidualMap<'a> {
    fn with_data<'b>(&self, data: &'b FidelityDataset<f64>) -> ResidualMap<'b> {
        ResidualMap {
            data,
            layout: self.layout,
            base: self.base.clone(),
            params: self.params.clone(),
            mode: self.mode,
            fixed_root: self.fixed_root.clone(),
        }
    }

    fn start(&self) -> DVector<f64> {
        DVector::from_iterator(self.params.len(), self.params.iter().map(|&i| self.base[i]))
    }

    fn theta(&self, th: &DVector<f64>) -> ModelParams<f64> {
        let mut x = self.base.clone();
        for (k, &i) in self.params.iter().enumerate() {
            x[i] = th[k];
        }
        self.layout.decode(&x)
    }

    fn decompose(&self, th: &DVector<f64>) -> Result<Decomposition<f64>> {
        decompose_dense(self.data, &self.theta(th))
    }

    fn root_of(&self, dec: &Decomposition<f64>) -> Result<DMatrix<f64>> {
        let l = dec
            .hf_cond_chol
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("dense conditional factor required".into()))?;
        whitening_root(&(l * l.transpose()), self.mode)
    }

    fn root(&self, th: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.fixed_root {
            Some(r) => Ok(r.clone()),
            None => self.root_of(&self.decompose(th)?),
        }
    }

    fn whitened(&self, th: &DVector<f64>) -> Result<DVector<f64>> {
        let dec = self.decompose(th)?;
        let root = match &self.fixed_root {
            Some(r) => r.clone(),
            None => self.root_of(&dec)?,
        };
        Ok(root * &dec.hf_residual)
    }

    /// Central-difference Jacobian of `v(Θ)`, one column per free parameter.
    fn jacobian(
        &self,
        th: &DVector<f64>,
        h: f64,
        v: impl Fn(&Self, &DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<DMatrix<f64>> {
        let mut cols = Vec::with_capacity(th.len());
        for k in 0..th.len() {
            let mut up = th.clone();
            up[k] += h;
            let mut dn = th.clone();
            dn[k] -= h;
            cols.push((v(self, &up)? - v(self, &dn)?) / (2.0 * h));
        }
        Ok(DMatrix::from_columns(&cols))
    }

    /// `gᵢ` as rows.
    fn g(&self, th: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
        self.jacobian(th, h, |m, t| m.whitened(t))
    }

    /// `∂μ_H/∂Θ` with `μ_H = r_H − e`.
    fn mean_jacobian(&self, th: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
        self.jacobian(th, h, |m, t| Ok(-m.decompose(t)?.hf_residual))
    }

    fn score(&self, th: &DVector<f64>, delta: f64, h: f64) -> Result<DVector<f64>> {
        let r = self.whitened(th)?;
        let psi = r.map(|v| huber_psi(v, delta));
        Ok(self.g(th, h)?.transpose() * psi)
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Empirical suprema over the parameter box (general regime).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    /// `sup ‖∂W^{1/2}/∂Θ‖`.
    pub l_w: f64,
    /// `sup ‖∂μ_H/∂Θ‖₂`.
    pub l_mu: f64,
    /// `sup ‖W^{1/2}‖₂`.
    pub kappa_w: f64,
    /// `sup ‖r_H − μ_H(Θ)‖`.
    pub r: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub regime: WhiteningRegime,
    pub delta: f64,
    pub j_inv_norm: f64,
    pub sum_g_norms: f64,
    /// `‖J⁻¹‖ δ Σᵢ‖gᵢ‖`.
    pub c_delta: f64,
    /// Looser closed-form bound for the regime.
    pub lemma_bound: f64,
    pub lipschitz: Option<LipschitzConstants>,
    pub n_h: usize,
    pub params: Vec<String>,
}

impl BoundReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["quantity", "value"])?;
        let mut rows: Vec<(&str, String)> = vec![
            ("regime", self.regime.label().to_string()),
            ("params", self.params.join(";")),
            ("n_h", self.n_h.to_string()),
            ("delta", self.delta.to_string()),
            ("j_inv_norm", self.j_inv_norm.to_string()),
            ("sum_g_norms", self.sum_g_norms.to_string()),
            ("c_delta", self.c_delta.to_string()),
            ("lemma_bound", self.lemma_bound.to_string()),
        ];
        if let Some(l) = &self.lipschitz {
            rows.extend([
                ("l_w", l.l_w.to_string()),
                ("l_mu", l.l_mu.to_string()),
                ("kappa_w", l.kappa_w.to_string()),
                ("r", l.r.to_string()),
                ("box_samples", l.samples.to_string()),
            ]);
        }
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Robust score under a contaminated sample, with the clean `gᵢ` and `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStep {
    /// `‖J⁻¹ Σᵢ ψ_δ(r̃ᵢ(y_c)) gᵢ‖`.
    pub norm: f64,
    pub score: DVector<f64>,
    pub psi: DVector<f64>,
    pub residuals: DVector<f64>,
}

impl OneStep {
    pub fn max_abs_psi(&self) -> f64 {
        self.psi.amax()
    }

    pub fn n_saturated(&self, delta: f64) -> usize {
        self.residuals.iter().filter(|r| r.abs() > delta).count()
    }
}

/// Robust score machinery linearized at a reference `Θ̂` on a clean sample.
pub struct HuberInfluence<'a> {
    map: ResidualMap<'a>,
    config: BoundConfig,
    th0: DVector<f64>,
    delta: f64,
    g0: DMatrix<f64>,
    j_inv: DMatrix<f64>,
    j_inv_norm: f64,
}

impl<'a> HuberInfluence<'a> {
    pub fn new(clean: &'a FidelityDataset<f64>, theta: &ModelParams<f64>, config: &BoundConfig) -> Result<Self> {
        config.validate()?;
        clean.require_both()?;
        let mut map = ResidualMap {
            data: clean,
            layout: config.layout,
            base: config.layout.encode(theta),
            params: config.params.clone(),
            mode: config.huber.whitening,
            fixed_root: None,
        };
        let th0 = map.start();
        if config.regime == WhiteningRegime::Fixed {
            map.fixed_root = Some(map.root(&th0)?);
        }
        let r0 = map.whitened(&th0)?;
        let delta = match config.huber.delta_policy {
            DeltaPolicy::Fixed(d) => d,
            _ => config.huber.delta_from_residuals(r0.as_slice())?,
        };
        let g0 = map.g(&th0, config.fd_step)?;
        let j = map.jacobian(&th0, config.jacobian_step, |m, t| m.score(t, delta, config.fd_step))?;
        let sv = j.singular_values();
        let (smin, smax) = (sv.min(), sv.max());
        if !(smin > 1e-12 * smax.max(f64::MIN_POSITIVE)) || !smin.is_finite() {
            return Err(Error::Degenerate(format!("singular score Jacobian (smallest singular value {smin:e})")));
        }
        let j_inv = j.try_inverse().ok_or_else(|| Error::Degenerate("singular score Jacobian".into()))?;
        Ok(Self { map, config: config.clone(), th0, delta, g0, j_inv, j_inv_norm: 1.0 / smin })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn j_inv_norm(&self) -> f64 {
        self.j_inv_norm
    }

    pub fn sum_g_norms(&self) -> f64 {
        self.g0.row_iter().map(|r| r.norm()).sum()
    }

    pub fn c_delta(&self) -> f64 {
        self.j_inv_norm * self.delta * self.sum_g_norms()
    }

    /// One-step influence of replacing the clean sample by `contaminated`.
    pub fn one_step(&self, contaminated: &FidelityDataset<f64>) -> Result<OneStep> {
        if contaminated.n_hf() != self.map.data.n_hf() || contaminated.n_lf() != self.map.data.n_lf() {
            return Err(Error::DimensionMismatch("contaminated sample must match the clean design".into()));
        }
        let residuals = self.map.with_data(contaminated).whitened(&self.th0)?;
        let psi = residuals.map(|v| huber_psi(v, self.delta));
        let score = self.g0.transpose() * &psi;
        let norm = (&self.j_inv * &score).norm();
        Ok(OneStep { norm, score, psi, residuals })
    }

    pub fn report(&self) -> Result<BoundReport> {
        let n_h = self.g0.nrows();
        let names = self.config.layout.names();
        let params = self.config.params.iter().map(|&i| names[i].to_string()).collect();
        let scale = self.j_inv_norm * self.delta;
        let (lemma_bound, lipschitz) = match self.config.regime {
            WhiteningRegime::Fixed => {
                let root = self.map.fixed_root.as_ref().expect("fixed regime stores its root");
                let dmu = self.map.mean_jacobian(&self.th0, self.config.fd_step)?;
                (scale * (n_h as f64).sqrt() * spectral_norm(root) * dmu.norm(), None)
            }
            WhiteningRegime::General => {
                let l = self.lipschitz()?;
                (scale * n_h as f64 * (l.l_w * l.r + l.kappa_w * l.l_mu), Some(l))
            }
        };
        Ok(BoundReport {
            regime: self.config.regime,
            delta: self.delta,
            j_inv_norm: self.j_inv_norm,
            sum_g_norms: self.sum_g_norms(),
            c_delta: self.c_delta(),
            lemma_bound,
            lipschitz,
            n_h,
            params,
        })
    }

    fn box_points(&self) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let w = self.config.box_half_width;
        let log_w = (1.0 + w).ln();
        let mut pts = vec![self.th0.clone()];
        for _ in 0..self.config.box_samples {
            let mut p = self.th0.clone();
            for (k, &i) in self.config.params.iter().enumerate() {
                p[k] += if i == ParamLayout::RHO {
                    self.th0[k] * rng.gen_range(-w..=w)
                } else {
                    rng.gen_range(-log_w..=log_w)
                };
            }
            pts.push(p);
        }
        pts
    }

    fn lipschitz(&self) -> Result<LipschitzConstants> {
        let h = self.config.fd_step;
        let evals: Vec<Option<(f64, f64, f64, f64)>> = self
            .box_points()
            .par_iter()
            .map(|p| {
                let dec = self.map.decompose(p).ok()?;
                let root = self.map.root_of(&dec).ok()?;
                let mut lw2 = 0.0;
                for k in 0..p.len() {
                    let mut up = p.clone();
                    up[k] += h;
                    let mut dn = p.clone();
                    dn[k] -= h;
                    let d = (self.map.root(&up).ok()? - self.map.root(&dn).ok()?) / (2.0 * h);
                    lw2 += spectral_norm(&d).powi(2);
                }
                let dmu = self.map.mean_jacobian(p, h).ok()?;
                Some((lw2.sqrt(), spectral_norm(&dmu), spectral_norm(&root), dec.hf_residual.norm()))
            })
            .collect();
        let ok: Vec<_> = evals.into_iter().flatten().collect();
        if ok.is_empty() {
            return Err(Error::Degenerate("no parameter draw in the box could be evaluated".into()));
        }
        let sup = |f: fn(&(f64, f64, f64, f64)) -> f64| ok.iter().map(f).fold(0.0, f64::max);
        Ok(LipschitzConstants {
            l_w: sup(|v| v.0),
            l_mu: sup(|v| v.1),
            kappa_w: sup(|v| v.2),
            r: sup(|v| v.3),
            samples: ok.len(),
        })
    }

    /// Refits `ρ` alone on `data` with `δ` frozen, minimizing the Huber sum plus,
    /// in the general regime, the whitening log-determinant.
    fn refit_rho(&self, data: &FidelityDataset<f64>, start: f64) -> Result<f64> {
        let mut map = self.map.with_data(data);
        map.base = self.map.base.clone();
        for (k, &i) in self.map.params.iter().enumerate() {
            map.base[i] = self.th0[k];
        }
        map.params = vec![ParamLayout::RHO];
        let general = self.config.regime == WhiteningRegime::General;
        let delta = self.delta;
        let objective = |x: &DVector<f64>| -> Option<f64> {
            let dec = map.decompose(x).ok()?;
            let root = match &map.fixed_root {
                Some(r) => r.clone(),
                None => map.root_of(&dec).ok()?,
            };
            let r = &root * &dec.hf_residual;
            let logdet = if general {
                -root.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>()
            } else {
                0.0
            };
            Some(huber_sum(&r, delta) + logdet)
        };
        let settings = OptimizerSettings { max_coordinate_step: 1.0, ..OptimizerSettings::default() };
        let out = minimize(objective, DVector::from_element(1, start), &settings)?;
        Ok(out.x[0])
    }
}

/// Builds the bound report for `theta` on a clean sample.
pub fn huber_influence_bound(
    dataset: &FidelityDataset<f64>,
    theta: &ModelParams<f64>,
    config: &BoundConfig,
) -> Result<BoundReport> {
    HuberInfluence::new(dataset, theta, config)?.report()
}

/// Sensitivity of an estimator to contamination of growing magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurve {
    pub magnitudes: Vec<f64>,
    pub estimator_kind: EstimatorKind,
    /// Gaussian: `s_ρ` at `theta`. Huber: `ρ` component of the robust score.
    pub scores: Vec<f64>,
    /// Gaussian: `s_ρ / A` with `A = r_Lᵀ Bᵀ Ω⁻¹ B r_L` on the clean sample.
    /// Huber: `‖J⁻¹ S(y_c)‖`.
    pub one_step: Vec<f64>,
    /// `ρ̂(contaminated) − ρ̂(clean)`, other parameters held at `theta`.
    pub estimator_deltas: Vec<f64>,
    /// `Σ |y_c − y|` over LF rows.
    pub mass: Vec<f64>,
    /// Largest `|ψ_δ(r̃ᵢ)|` (Huber only).
    pub max_abs_psi: Vec<Option<f64>>,
    pub n_saturated: Vec<Option<usize>>,
    pub delta: Option<f64>,
    /// Per-magnitude failure messages; the matching values are NaN.
    pub failures: Vec<Option<String>>,
}

impl InfluenceCurve {
    /// `(ρ̂(contaminated) − ρ̂(clean)) / mass`.
    pub fn divided_differences(&self) -> Vec<f64> {
        self.estimator_deltas
            .iter()
            .zip(&self.mass)
            .map(|(d, m)| if *m > 0.0 { d / m } else { f64::NAN })
            .collect()
    }

    pub fn max_one_step(&self) -> f64 {
        self.one_step.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "magnitude",
            "estimator",
            "score",
            "one_step",
            "estimator_delta",
            "divided_difference",
            "max_abs_psi",
            "n_saturated",
            "error",
        ])?;
        let dd = self.divided_differences();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for i in 0..self.magnitudes.len() {
            w.write_record([
                self.magnitudes[i].to_string(),
                self.estimator_kind.label().to_string(),
                self.scores[i].to_string(),
                self.one_step[i].to_string(),
                self.estimator_deltas[i].to_string(),
                dd[i].to_string(),
                opt(self.max_abs_psi[i]),
                self.n_saturated[i].map(|n| n.to_string()).unwrap_or_default(),
                self.failures[i].clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct CurvePoint {
    score: f64,
    one_step: f64,
    estimator_delta: f64,
    mass: f64,
    max_abs_psi: Option<f64>,
    n_saturated: Option<usize>,
}

/// Evaluates the estimator's sensitivity for each magnitude substituted into
/// `template`, keeping every other parameter at `theta`.
pub fn influence_curve(
    dataset: &FidelityDataset<f64>,
    theta: &ModelParams<f64>,
    template: &ContaminationSpec,
    magnitudes: &[f64],
    kind: EstimatorKind,
    config: &BoundConfig,
) -> Result<InfluenceCurve> {
    if magnitudes.is_empty() {
        return Err(Error::EmptyInput("influence curve magnitudes"));
    }
    if magnitudes.windows(2).any(|w| !(w[1] > w[0])) || magnitudes.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidParameter("magnitudes must be finite and strictly increasing".into()));
    }
    let clean_reg = ConditionalRegression::new(dataset, theta)?;
    let info = clean_reg.information();
    let rho_clean_gls = clean_reg.gls()?;
    let huber = match kind {
        EstimatorKind::Huber => Some(HuberInfluence::new(dataset, theta, config)?),
        EstimatorKind::Gaussian => None,
    };
    let rho_clean_huber = match &huber {
        Some(h) => Some(h.refit_rho(dataset, theta.rho)?),
        None => None,
    };

    let point = |m: f64| -> Result<CurvePoint> {
        let c = template.with_magnitude(m).apply(dataset)?;
        let mass = c.dataset.lf.values.iter().zip(&dataset.lf.values).map(|(a, b)| (a - b).abs()).sum();
        let reg = ConditionalRegression::new(&c.dataset, theta)?;
        match &huber {
            None => {
                let score = reg.score(theta.rho);
                Ok(CurvePoint {
                    score,
                    one_step: score / info,
                    estimator_delta: reg.gls()? - rho_clean_gls,
                    mass,
                    max_abs_psi: None,
                    n_saturated: None,
                })
            }
            Some(h) => {
                let step = h.one_step(&c.dataset)?;
                let rho_pos = h.config.params.iter().position(|&i| i == ParamLayout::RHO);
                let start = rho_clean_huber.expect("huber refit at clean sample");
                Ok(CurvePoint {
                    score: rho_pos.map(|k| step.score[k]).unwrap_or(f64::NAN),
                    one_step: step.norm,
                    estimator_delta: h.refit_rho(&c.dataset, start)? - start,
                    mass,
                    max_abs_psi: Some(step.max_abs_psi()),
                    n_saturated: Some(step.n_saturated(h.delta)),
                })
            }
        }
    };
    let points: Vec<Result<CurvePoint>> = magnitudes.par_iter().map(|&m| point(m)).collect();

    let n = magnitudes.len();
    let mut curve = InfluenceCurve {
        magnitudes: magnitudes.to_vec(),
        estimator_kind: kind,
        scores: Vec::with_capacity(n),
        one_step: Vec::with_capacity(n),
        estimator_deltas: Vec::with_capacity(n),
        mass: Vec::with_capacity(n),
        max_abs_psi: Vec::with_capacity(n),
        n_saturated: Vec::with_capacity(n),
        delta: huber.as_ref().map(|h| h.delta),
        failures: Vec::with_capacity(n),
    };
    for p in points {
        match p {
            Ok(p) => {
                curve.scores.push(p.score);
                curve.one_step.push(p.one_step);
                curve.estimator_deltas.push(p.estimator_delta);
                curve.mass.push(p.mass);
                curve.max_abs_psi.push(p.max_abs_psi);
                curve.n_saturated.push(p.n_saturated);
                curve.failures.push(None);
            }
            Err(e) => {
                curve.scores.push(f64::NAN);
                curve.one_step.push(f64::NAN);
                curve.estimator_deltas.push(f64::NAN);
                curve.mass.push(f64::NAN);
                curve.max_abs_psi.push(None);
                curve.n_saturated.push(None);
                curve.failures.push(Some(e.to_string()));
            }
        }
    }
    Ok(curve)
}

/// Huber loss summed over `Ω`-whitened conditional residuals at `rho`.
pub fn conditional_huber_loss<T: Scalar>(reg: &ConditionalRegression<T>, rho: T, delta: T) -> T {
    let (z, w) = reg.whitened();
    z.iter().zip(w.iter()).fold(T::zero(), |acc, (&zi, &wi)| acc + huber_loss(zi - rho * wi, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelParams, SpaceTimePoint};
    use crate::simulation::{simulate_mf, DgpConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small() -> (FidelityDataset<f64>, ModelParams<f64>) {
        let cfg = DgpConfig { grid_side: 3, n_times: 4, seed: 11, ..DgpConfig::default() };
        let sim = simulate_mf(&cfg).unwrap();
        (sim.dataset, cfg.true_params().unwrap())
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn pseudo_true_scalar_example() {
        let (rs, k) = pseudo_true_rho(&scalar(2.0), &scalar(2.0), &scalar(1.0), &scalar(1.0), 0.6).unwrap();
        assert_relative_eq!(k, 0.5, epsilon = 1e-12);
        assert_relative_eq!(rs, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_true_without_contamination() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.3, 0.7]);
        let (rs, k) = pseudo_true_rho(&c, &DMatrix::zeros(2, 2), &b, &scalar(0.4), 0.6).unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(rs, 0.6);
    }

    #[test]
    fn pseudo_true_errors() {
        assert!(pseudo_true_rho(&scalar(1.0), &scalar(1.0), &scalar(0.0), &scalar(1.0), 0.6).is_err());
        assert!(pseudo_true_rho(&scalar(1.0), &DMatrix::zeros(2, 2), &scalar(1.0), &scalar(1.0), 0.6).is_err());
    }

    #[test]
    fn kappa_decreases_with_contamination_scale() {
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.8, 0.3, 0.8, 2.0, 0.8, 0.3, 0.8, 2.0]);
        let su = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 0.2]));
        let b = DMatrix::from_row_slice(2, 3, &[0.5, 0.3, 0.1, 0.1, 0.2, 0.6]);
        let om = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let ks: Vec<f64> =
            [1.0, 2.0, 4.0].iter().map(|s| pseudo_true_rho(&c, &(&su * *s), &b, &om, 0.6).unwrap().1).collect();
        assert!(ks.iter().all(|k| *k > 0.0 && *k <= 1.0));
        assert!(ks[0] > ks[1] && ks[1] > ks[2], "{ks:?}");
    }

    #[test]
    fn score_scalar_specialization() {
        let reg = ConditionalRegression::from_parts(
            &scalar(1.0),
            &scalar(1.0),
            &DVector::from_element(1, 1.5),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert_relative_eq!(reg.score(0.6), (2.0 - 0.6 * 1.5) * 1.5, epsilon = 1e-12);
    }

    #[test]
    fn score_vanishes_at_gls_and_matches_likelihood_derivative() {
        let (data, theta) = small();
        let rho = gls_rho_of(&data, &theta);
        let at_gls = ModelParams { rho, ..theta };
        assert!(score_rho(&data, &at_gls).unwrap().abs() < 1e-8);

        let reg = ConditionalRegression::new(&data, &theta).unwrap();
        let h = 1e-5;
        let fd = -(reg.nll(theta.rho + h) - reg.nll(theta.rho - h)) / (2.0 * h);
        assert_relative_eq!(score_rho(&data, &theta).unwrap(), fd, max_relative = 1e-6);
    }

    fn gls_rho_of(data: &FidelityDataset<f64>, theta: &ModelParams<f64>) -> f64 {
        ConditionalRegression::new(data, theta).unwrap().gls().unwrap()
    }

    #[test]
    fn score_zero_for_exact_relation() {
        let b = DMatrix::from_row_slice(2, 3, &[0.5, 0.3, 0.1, 0.1, 0.2, 0.6]);
        let r_l = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let r_h = &b * &r_l * 0.6;
        let reg = ConditionalRegression::from_parts(&b, &DMatrix::identity(2, 2), &r_l, r_h).unwrap();
        assert!(reg.score(0.6f64).abs() < 1e-14);
    }

    #[test]
    fn huber_rho_matches_gls_with_huge_threshold() {
        let (data, theta) = small();
        let reg = ConditionalRegression::new(&data, &theta).unwrap();
        let cfg = HuberConfig { delta_policy: DeltaPolicy::Fixed(1e9), ..HuberConfig::default() };
        let (rho, d) = huber_rho(&reg, &cfg).unwrap();
        assert_eq!(d, 1e9);
        assert_relative_eq!(rho, reg.gls().unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn huber_rho_minimizes_conditional_loss() {
        let (data, theta) = small();
        let c = crate::simulation::inject_outliers(&data, 10.0, 0.2, 3).unwrap();
        let reg = ConditionalRegression::new(&c.dataset, &theta).unwrap();
        let (rho, delta) = huber_rho(&reg, &HuberConfig::default()).unwrap();
        let f0 = conditional_huber_loss(&reg, rho, delta);
        for eps in [-1e-3, 1e-3] {
            assert!(conditional_huber_loss(&reg, rho + eps, delta) >= f0 - 1e-12);
        }
    }

    #[test]
    fn shift_coefficient_is_leading_term() {
        let (data, theta) = small();
        let mask: Vec<bool> = data.lf.station.iter().map(|&s| s == 0).collect();
        let coef = shift_score_coefficient(&data, &theta, &mask).unwrap();
        assert!(coef < 0.0);
        let big = 1e4;
        let shifted = crate::simulation::inject_level_shift(&data, big, -1.0, &[0]).unwrap();
        let s = score_rho(&shifted.dataset, &theta).unwrap();
        assert_relative_eq!(s / (big * big), coef, max_relative = 1e-3);
    }

    #[test]
    fn bound_is_linear_in_delta() {
        let (data, theta) = small();
        let mk = |d: f64| BoundConfig {
            huber: HuberConfig { delta_policy: DeltaPolicy::Fixed(d), ..HuberConfig::default() },
            regime: WhiteningRegime::Fixed,
            ..BoundConfig::default()
        };
        // J depends on δ only through which residuals are saturated; with a large δ none are.
        let a = huber_influence_bound(&data, &theta, &mk(1e3)).unwrap();
        let b = huber_influence_bound(&data, &theta, &mk(2e3)).unwrap();
        assert_relative_eq!(b.c_delta, 2.0 * a.c_delta, max_relative = 1e-6);
        assert_relative_eq!(a.c_delta, a.j_inv_norm * a.delta * a.sum_g_norms, max_relative = 1e-12);
        assert!(a.c_delta <= a.lemma_bound * (1.0 + 1e-9));
    }

    #[test]
    fn fixed_regime_single_observation() {
        // One LF and one HF point: g = -ρ-derivative of μ_H = B r_L times the root.
        let p = SpaceTimePoint::new(0.0, 0.0, 0.0);
        let mut data = FidelityDataset {
            stations: vec![crate::dataset::Station { id: "a".into(), s1: 0.0, s2: 0.0 }],
            lf: Default::default(),
            hf: Default::default(),
        };
        data.lf.push(p, 1.7, 0);
        data.hf.push(p, 0.4, 0);
        let k = KernelParams::new(1.0, 1.0, 1.0, 1.0);
        let theta = ModelParams { rho: 0.6, kernel_l: k, kernel_delta: k, tau_l_sq: 0.1, tau_h_sq: 0.1 };
        let cfg = BoundConfig {
            huber: HuberConfig { delta_policy: DeltaPolicy::Fixed(0.5), ..HuberConfig::default() },
            regime: WhiteningRegime::Fixed,
            ..BoundConfig::default()
        };
        let r = huber_influence_bound(&data, &theta, &cfg).unwrap();
        let b = 1.0 / 1.1;
        let mu_l = b * 1.7;
        let c: f64 = 0.36 * (1.0 - b) + 1.0 + 0.1;
        let root = 1.0 / c.sqrt();
        assert_relative_eq!(r.sum_g_norms, root * mu_l, max_relative = 1e-6);
        assert_relative_eq!(r.lemma_bound, r.j_inv_norm * 0.5 * root * mu_l, max_relative = 1e-6);
    }

    #[test]
    fn one_step_respects_bound_both_regimes() {
        let (data, theta) = small();
        for regime in [WhiteningRegime::General, WhiteningRegime::Fixed] {
            let cfg = BoundConfig { regime, box_samples: 4, ..BoundConfig::default() };
            let inf = HuberInfluence::new(&data, &theta, &cfg).unwrap();
            let rep = inf.report().unwrap();
            assert!(rep.c_delta <= rep.lemma_bound * (1.0 + 1e-6), "{rep:?}");
            for m in [1.0, 10.0, 100.0] {
                let c = crate::simulation::inject_outliers(&data, m, 0.3, 5).unwrap();
                let step = inf.one_step(&c.dataset).unwrap();
                assert!(step.norm <= rep.c_delta * (1.0 + 1e-12));
                assert!(step.max_abs_psi() <= inf.delta());
            }
        }
    }

    #[test]
    fn curves_gaussian_unbounded_huber_capped() {
        let (data, theta) = small();
        let spec = ContaminationSpec::SingleOutlier { magnitude: 1.0, row: 5 };
        let mags = [10.0, 100.0, 1000.0];
        let cfg = BoundConfig::default();
        let g = influence_curve(&data, &theta, &spec, &mags, EstimatorKind::Gaussian, &cfg).unwrap();
        assert!(g.failures.iter().all(Option::is_none));
        assert!(g.scores[2].abs() / g.scores[0].abs() >= 100.0, "{:?}", g.scores);
        let h = influence_curve(&data, &theta, &spec, &mags, EstimatorKind::Huber, &cfg).unwrap();
        let delta = h.delta.unwrap();
        for p in h.max_abs_psi.iter().flatten() {
            assert!(*p <= delta);
        }
        assert_eq!(h.max_abs_psi[2], Some(delta));
        let bound = huber_influence_bound(&data, &theta, &cfg).unwrap();
        assert!(h.max_one_step() <= bound.c_delta);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn curve_input_validation() {
        let (data, theta) = small();
        let spec = ContaminationSpec::SingleOutlier { magnitude: 1.0, row: 0 };
        let cfg = BoundConfig::default();
        assert!(influence_curve(&data, &theta, &spec, &[], EstimatorKind::Gaussian, &cfg).is_err());
        assert!(influence_curve(&data, &theta, &spec, &[2.0, 1.0], EstimatorKind::Gaussian, &cfg).is_err());
        let bad = ContaminationSpec::SingleOutlier { magnitude: 1.0, row: 10_000 };
        let c = influence_curve(&data, &theta, &bad, &[1.0], EstimatorKind::Gaussian, &cfg).unwrap();
        assert!(c.failures[0].is_some() && c.scores[0].is_nan());
    }

    #[test]
    fn config_validation() {
        let bad = BoundConfig { params: vec![], ..BoundConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BoundConfig { params: vec![0, 0], ..BoundConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BoundConfig { params: vec![99], ..BoundConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!("fixed".parse::<WhiteningRegime>().unwrap(), WhiteningRegime::Fixed);
        assert!("other".parse::<WhiteningRegime>().is_err());
    }

    #[test]
    fn report_csv_lists_constants() {
        let (data, theta) = small();
        let cfg = BoundConfig { box_samples: 2, ..BoundConfig::default() };
        let rep = huber_influence_bound(&data, &theta, &cfg).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("c_delta,") && s.contains("kappa_w,") && s.contains("general_whitening"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kappa_in_unit_interval(c in 0.1f64..5.0, u in 0.0f64..5.0, b in 0.1f64..3.0, o in 0.1f64..3.0) {
            let (rs, k) = pseudo_true_rho(&scalar(c), &scalar(u), &scalar(b), &scalar(o), 0.6).unwrap();
            prop_assert!(k > 0.0 && k <= 1.0);
            prop_assert!((rs - 0.6 * k).abs() < 1e-14);
            prop_assert!((k - c / (c + u)).abs() < 1e-12);
        }

        #[test]
        fn psi_never_exceeds_delta(r in -1e6f64..1e6, d in 1e-6f64..10.0) {
            prop_assert!(huber_psi(r, d).abs() <= d);
            if r.abs() > d {
                prop_assert_eq!(huber_psi(r, d).abs(), d);
            }
        }
    }
}
