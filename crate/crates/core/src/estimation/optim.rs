//! Limited-memory BFGS with central-difference gradients.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub max_iter: usize,
    /// Converged when the Euclidean gradient norm drops below this.
    pub grad_tol: f64,
    /// Converged when `|Δf| ≤ rel_tol · max(1, |f|)`.
    pub rel_tol: f64,
    /// Central-difference step on the unconstrained scale.
    pub step: f64,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Largest allowed change of any coordinate per iteration.
    pub max_coordinate_step: f64,
    /// Seed for randomized initialisation by callers.
    pub seed: u64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-9,
            step: 1e-5,
            memory: 8,
            max_coordinate_step: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    LineSearchFailed,
    GradientFailed,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome<T: Scalar> {
    pub x: DVector<T>,
    pub f: T,
    pub grad_norm: T,
    pub iters: usize,
    pub n_evals: usize,
    pub converged: bool,
    pub reason: StopReason,
}

/// Componentwise `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
///
/// `f` returns `None` where the objective is undefined; any such evaluation is an error.
pub fn numeric_gradient<T, F>(mut f: F, x: &DVector<T>, h: T) -> Result<DVector<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Option<T>,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    let two_h = h + h;
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp).filter(|v| v.is_finite());
        xp[i] = xi - h;
        let fm = f(&xp).filter(|v| v.is_finite());
        xp[i] = xi;
        match (fp, fm) {
            (Some(a), Some(b)) => g[i] = (a - b) / two_h,
            _ => return Err(Error::NonFinite("objective in gradient neighbourhood")),
        }
    }
    Ok(g)
}

/// Minimizes `f` from `x0`. Evaluations returning `None` or non-finite values are
/// treated as infeasible and rejected by the line search.
pub fn minimize<T, F>(mut f: F, x0: DVector<T>, settings: &OptimizerSettings) -> Result<OptimOutcome<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Option<T>,
{
    let mut n_evals = 0usize;
    let mut eval = |x: &DVector<T>, n: &mut usize| {
        *n += 1;
        f(x).filter(|v| v.is_finite())
    };

    let h = T::of(settings.step);
    let mut x = x0;
    let mut fx = eval(&x, &mut n_evals).ok_or(Error::NonFinite("objective at initial point"))?;
    let mut g = numeric_gradient(|p| eval(p, &mut n_evals), &x, h)?;
    let mut history: VecDeque<(DVector<T>, DVector<T>, T)> = VecDeque::with_capacity(settings.memory);

    let grad_tol = T::of(settings.grad_tol);
    let rel_tol = T::of(settings.rel_tol);
    let max_step = T::of(settings.max_coordinate_step);
    let c1 = T::of(1e-4);

    let mut iters = 0;
    let reason = loop {
        if g.norm() < grad_tol {
            break StopReason::GradientTolerance;
        }
        if iters >= settings.max_iter {
            break StopReason::MaxIterations;
        }
        iters += 1;

        let mut d = two_loop(&g, &history);
        let mut slope = g.dot(&d);
        if !(slope < T::zero()) {
            history.clear();
            d = -g.clone();
            slope = g.dot(&d);
        }
        // First step without curvature information: unit length.
        let mut alpha = if history.is_empty() { T::one() / g.norm().max(T::one()) } else { T::one() };
        let biggest = d.amax() * alpha;
        if biggest > max_step {
            alpha *= max_step / biggest;
        }

        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &d * alpha;
            if let Some(ft) = eval(&trial, &mut n_evals) {
                if ft <= fx + c1 * alpha * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= T::of(0.5);
        }
        let Some((x_new, f_new)) = accepted else {
            if !history.is_empty() {
                // Retry once along steepest descent before giving up.
                history.clear();
                continue;
            }
            break StopReason::LineSearchFailed;
        };

        let g_new = match numeric_gradient(|p| eval(p, &mut n_evals), &x_new, h) {
            Ok(g) => g,
            Err(_) => {
                x = x_new;
                fx = f_new;
                break StopReason::GradientFailed;
            }
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > T::of(1e-12) * s.norm() * y.norm() && sy > T::zero() {
            if history.len() == settings.memory.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, T::one() / sy));
        }
        let df = (fx - f_new).abs();
        x = x_new;
        g = g_new;
        let f_old = fx;
        fx = f_new;
        if df <= rel_tol * f_old.abs().max(T::one()) {
            break StopReason::ObjectiveTolerance;
        }
    };

    let converged = matches!(reason, StopReason::GradientTolerance | StopReason::ObjectiveTolerance);
    Ok(OptimOutcome { grad_norm: g.norm(), x, f: fx, iters, n_evals, converged, reason })
}

fn two_loop<T: Scalar>(g: &DVector<T>, history: &VecDeque<(DVector<T>, DVector<T>, T)>) -> DVector<T> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = *rho * s.dot(&q);
        q.axpy(-a, y, T::one());
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = s.dot(y) / y.dot(y);
        q *= gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * y.dot(&q);
        q.axpy(a - b, s, T::one());
    }
    -q
}
