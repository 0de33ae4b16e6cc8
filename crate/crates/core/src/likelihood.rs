//! LF-marginal / HF-conditional decomposition of the joint Gaussian model.
//!
//! Factoring `p(y_L, y_H) = p(y_L) p(y_H | y_L)` gives every quantity the
//! Gaussian and robust objectives need: the LF marginal terms, the
//! conditional HF residual `e = r_H − E[r_H | r_L]` and the conditional
//! covariance `C = Σ_HH − Σ_HL Σ_LL⁻¹ Σ_LH`.
//!
//! Two routes compute it. [`Engine::Dense`] factors the joint covariance and
//! works for any input layout. [`Engine::Panel`] applies when each fidelity is a
//! complete station × time panel on a shared time grid and both processes share
//! one temporal length-scale: the temporal eigenbasis then block-diagonalizes
//! the joint covariance into one small spatial system per temporal mode.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::covariance::{jittered_cholesky_ctx, ModelParams, DEFAULT_JITTER, JITTER_ESCALATIONS};
use crate::dataset::FidelityDataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_unchecked, symmetric_gram_unchecked};
use crate::scalar::Scalar;

/// Marginal/conditional pieces of the joint negative log-likelihood.
#[derive(Debug, Clone)]
pub struct Decomposition<T: Scalar> {
    /// `½ log|Σ_LL|`
    pub lf_half_logdet: T,
    /// `½ r_Lᵀ Σ_LL⁻¹ r_L`
    pub lf_half_quad: T,
    /// `½ log|C|`
    pub hf_half_logdet: T,
    /// `½ eᵀ C⁻¹ e`
    pub hf_half_quad: T,
    /// Conditional HF residual `e`, in HF row order.
    pub hf_residual: DVector<T>,
    /// `diag(C)`.
    pub hf_cond_var: DVector<T>,
    /// Lower Cholesky factor of `C` (dense route only).
    pub hf_cond_chol: Option<DMatrix<T>>,
    pub jitter: T,
}

impl<T: Scalar> Decomposition<T> {
    /// `½ log|Σ| + ½ rᵀ Σ⁻¹ r`.
    pub fn gaussian_nll(&self) -> T {
        self.lf_nll() + self.hf_half_logdet + self.hf_half_quad
    }

    /// `½ log|Σ_LL| + ½ r_Lᵀ Σ_LL⁻¹ r_L`.
    pub fn lf_nll(&self) -> T {
        self.lf_half_logdet + self.lf_half_quad
    }

    /// `L_C⁻¹ e` when the dense factor is available.
    pub fn hf_whitened_full(&self) -> Option<DVector<T>> {
        self.hf_cond_chol
            .as_ref()
            .map(|l| l.solve_lower_triangular(&self.hf_residual).expect("non-singular conditional factor"))
    }
}

/// Complete-panel layout of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel<T> {
    pub times: Vec<T>,
    pub lf_sites: Vec<(T, T)>,
    pub hf_sites: Vec<(T, T)>,
}

impl<T: Scalar> Panel<T> {
    /// Detects a station-major, time-fastest complete panel shared by both fidelities.
    pub fn detect(dataset: &FidelityDataset<T>) -> Option<Self> {
        let hf = &dataset.hf;
        let lf = &dataset.lf;
        if hf.is_empty() || lf.is_empty() {
            return None;
        }
        let first_station = lf.station[0];
        let nt = lf.station.iter().take_while(|&&s| s == first_station).count();
        let times: Vec<T> = lf.points[..nt].iter().map(|p| p.t).collect();
        let lf_sites = Self::sites(&lf.points, &lf.station, &times)?;
        let hf_sites = Self::sites(&hf.points, &hf.station, &times)?;
        Some(Self { times, lf_sites, hf_sites })
    }

    fn sites(points: &[crate::kernels::SpaceTimePoint<T>], station: &[usize], times: &[T]) -> Option<Vec<(T, T)>> {
        let nt = times.len();
        if nt == 0 || points.len() % nt != 0 {
            return None;
        }
        let mut sites = Vec::with_capacity(points.len() / nt);
        for (block, chunk) in points.chunks(nt).enumerate() {
            let st = &station[block * nt..(block + 1) * nt];
            let (s1, s2) = (chunk[0].s1, chunk[0].s2);
            let consistent = chunk
                .iter()
                .zip(times)
                .zip(st)
                .all(|((p, &t), &s)| p.t == t && p.s1 == s1 && p.s2 == s2 && s == st[0]);
            if !consistent {
                return None;
            }
            sites.push((s1, s2));
        }
        Some(sites)
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }
}

/// Likelihood evaluation route.
#[derive(Debug, Clone)]
pub enum Engine<T> {
    Dense,
    Panel(Panel<T>),
}

impl<T: Scalar> Engine<T> {
    /// Panel route when the layout allows it, dense otherwise.
    pub fn auto(dataset: &FidelityDataset<T>) -> Self {
        Panel::detect(dataset).map(Engine::Panel).unwrap_or(Engine::Dense)
    }

    /// Computes the decomposition. `need_dense_factor` forces the dense route,
    /// which is required by full and regularized whitening.
    pub fn decompose(
        &self,
        dataset: &FidelityDataset<T>,
        theta: &ModelParams<T>,
        need_dense_factor: bool,
    ) -> Result<Decomposition<T>> {
        match self {
            Engine::Panel(panel)
                if !need_dense_factor && theta.kernel_l.lengthscale_t == theta.kernel_delta.lengthscale_t =>
            {
                decompose_panel(panel, dataset, theta)
            }
            _ => decompose_dense(dataset, theta),
        }
    }
}

/// Joint covariance of `[y_L; y_H]` without the derived operators.
pub(crate) fn joint_sigma<T: Scalar>(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> DMatrix<T> {
    let xl = &dataset.lf.points;
    let xh = &dataset.hf.points;
    let (nl, nh) = (xl.len(), xh.len());
    let rho = theta.rho;
    let mut sigma = DMatrix::zeros(nl + nh, nl + nh);
    sigma.view_mut((0, 0), (nl, nl)).copy_from(&symmetric_gram_unchecked(xl, &theta.kernel_l));
    let k_lh = gram_unchecked(xl, xh, &theta.kernel_l) * rho;
    sigma.view_mut((nl, 0), (nh, nl)).copy_from(&k_lh.transpose());
    sigma.view_mut((0, nl), (nl, nh)).copy_from(&k_lh);
    let hh = symmetric_gram_unchecked(xh, &theta.kernel_l) * (rho * rho)
        + symmetric_gram_unchecked(xh, &theta.kernel_delta);
    sigma.view_mut((nl, nl), (nh, nh)).copy_from(&hh);
    for i in 0..nl {
        sigma[(i, i)] += theta.tau_l_sq;
    }
    for i in nl..nl + nh {
        sigma[(i, i)] += theta.tau_h_sq;
    }
    sigma
}

/// Dense route: one Cholesky of the joint covariance.
pub fn decompose_dense<T: Scalar>(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> Result<Decomposition<T>> {
    dataset.require_both()?;
    theta.validate()?;
    let (nl, nh) = (dataset.n_lf(), dataset.n_hf());
    let sigma = joint_sigma(dataset, theta);
    let chol = jittered_cholesky_ctx(&sigma, T::of(DEFAULT_JITTER), "joint covariance")?;
    let r = DVector::from_vec(dataset.stacked_values());
    let z = chol.solve_lower(&r);
    let l = chol.factor.l();

    let half = T::of(0.5);
    let mut lf_half_logdet = T::zero();
    for i in 0..nl {
        lf_half_logdet += l[(i, i)].ln();
    }
    let mut hf_half_logdet = T::zero();
    for i in nl..nl + nh {
        hf_half_logdet += l[(i, i)].ln();
    }
    let z_l = z.rows(0, nl);
    let z_h = z.rows(nl, nh).into_owned();
    let l22 = l.view((nl, nl), (nh, nh)).into_owned();
    let e = &l22 * &z_h;
    let cond_var = DVector::from_fn(nh, |i, _| l22.row(i).norm_squared());

    Ok(Decomposition {
        lf_half_logdet,
        lf_half_quad: half * z_l.norm_squared(),
        hf_half_logdet,
        hf_half_quad: half * z_h.norm_squared(),
        hf_residual: e,
        hf_cond_var: cond_var,
        hf_cond_chol: Some(l22),
        jitter: chol.jitter,
    })
}

/// Panel route. Requires `kernel_l.lengthscale_t == kernel_delta.lengthscale_t`.
pub fn decompose_panel<T: Scalar>(
    panel: &Panel<T>,
    dataset: &FidelityDataset<T>,
    theta: &ModelParams<T>,
) -> Result<Decomposition<T>> {
    theta.validate()?;
    if theta.kernel_l.lengthscale_t != theta.kernel_delta.lengthscale_t {
        return Err(Error::InvalidParameter("panel route needs a shared temporal length-scale".into()));
    }
    let nt = panel.n_times();
    let (nsl, nsh) = (panel.lf_sites.len(), panel.hf_sites.len());
    if dataset.n_lf() != nsl * nt || dataset.n_hf() != nsh * nt {
        return Err(Error::DimensionMismatch("dataset does not match panel layout".into()));
    }
    let ns = nsl + nsh;
    let rho = theta.rho;

    // Temporal eigenbasis (unit variance factor).
    let kt = DMatrix::from_fn(nt, nt, |i, j| theta.kernel_l.eval_temporal(panel.times[i], panel.times[j]));
    let eig = SymmetricEigen::new(kt);
    let u = eig.eigenvectors;
    let lam = eig.eigenvalues;

    // Spatial factors (carry the signal variances).
    let sites: Vec<(T, T)> = panel.lf_sites.iter().chain(&panel.hf_sites).copied().collect();
    let mut s1 = DMatrix::zeros(ns, ns);
    for i in 0..ns {
        for j in 0..=i {
            let kl = theta.kernel_l.eval_spatial(sites[i], sites[j]);
            let v = match (i < nsl, j < nsl) {
                (true, true) => kl,
                (false, true) => rho * kl,
                (true, false) => unreachable!(),
                (false, false) => {
                    rho * rho * kl + theta.kernel_delta.eval_spatial(sites[i], sites[j])
                }
            };
            s1[(i, j)] = v;
            s1[(j, i)] = v;
        }
    }
    let noise: Vec<T> = (0..ns).map(|i| if i < nsl { theta.tau_l_sq } else { theta.tau_h_sq }).collect();

    // Rotated responses: rows = sites, columns = temporal modes.
    let yl = DMatrix::from_row_slice(nsl, nt, &dataset.lf.values);
    let yh = DMatrix::from_row_slice(nsh, nt, &dataset.hf.values);
    let mut y_rot = DMatrix::zeros(ns, nt);
    y_rot.view_mut((0, 0), (nsl, nt)).copy_from(&(yl * &u));
    y_rot.view_mut((nsl, 0), (nsh, nt)).copy_from(&(yh * &u));

    let ten = T::of(10.0);
    let mut eps = T::zero();
    'ladder: for step in 0..=(JITTER_ESCALATIONS + 1) {
        if step == 1 {
            eps = T::of(DEFAULT_JITTER);
        } else if step > 1 {
            eps *= ten;
        }
        let mut lf_half_logdet = T::zero();
        let mut hf_half_logdet = T::zero();
        let mut lf_quad = T::zero();
        let mut hf_quad = T::zero();
        let mut e_rot = DMatrix::zeros(nsh, nt);
        let mut var_rot = DMatrix::zeros(nsh, nt);
        for j in 0..nt {
            let mut m = &s1 * lam[j];
            for i in 0..ns {
                m[(i, i)] += noise[i] + eps;
            }
            let Some(chol) = Cholesky::new(m) else { continue 'ladder };
            let l = chol.l_dirty();
            if (0..ns).any(|i| !(l[(i, i)] > T::zero()) || !l[(i, i)].is_finite()) {
                continue 'ladder;
            }
            let l = chol.l();
            let z = l.solve_lower_triangular(&y_rot.column(j).into_owned()).expect("non-singular factor");
            for i in 0..nsl {
                lf_half_logdet += l[(i, i)].ln();
            }
            for i in nsl..ns {
                hf_half_logdet += l[(i, i)].ln();
            }
            lf_quad += z.rows(0, nsl).norm_squared();
            let zh = z.rows(nsl, nsh);
            hf_quad += zh.norm_squared();
            let l22 = l.view((nsl, nsl), (nsh, nsh));
            e_rot.set_column(j, &(l22 * zh));
            for s in 0..nsh {
                var_rot[(s, j)] = l22.row(s).norm_squared();
            }
        }
        let e = e_rot * u.transpose();
        let u_sq = u.map(|v| v * v);
        let var = var_rot * u_sq.transpose();
        let half = T::of(0.5);
        return Ok(Decomposition {
            lf_half_logdet,
            lf_half_quad: half * lf_quad,
            hf_half_logdet,
            hf_half_quad: half * hf_quad,
            hf_residual: DVector::from_iterator(nsh * nt, e.transpose().iter().copied()),
            hf_cond_var: DVector::from_iterator(nsh * nt, var.transpose().iter().copied()),
            hf_cond_chol: None,
            jitter: eps,
        });
    }
    Err(Error::NotPositiveDefinite { max_jitter: eps.as_f64(), context: "panel covariance" })
}
