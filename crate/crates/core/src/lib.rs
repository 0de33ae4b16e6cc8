//! Robust multi-fidelity Gaussian-process co-kriging.
//!
//! The high-fidelity field is modelled as `f_H = ρ f_L + δ` with independent
//! Gaussian processes `f_L` and `δ` over space-time. Parameters are estimated by
//! Gaussian maximum likelihood or by a bounded-influence Huber objective.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod estimation;
pub mod io;
pub mod kernels;
pub mod likelihood;
pub mod prediction;
pub mod scalar;
pub mod simulation;
pub mod theory;

pub use covariance::{assemble_joint, jittered_cholesky, whitening_root, CovarianceBlocks, ModelParams, WhiteningMode};
pub use dataset::{FidelityDataset, Observations, Station};
pub use error::{Error, Result};
pub use estimation::{fit, gaussian_nll, gls_rho, heuristic_init, FitOptions, FitResult, HuberConfig, Loss};
pub use io::{read_station_csv, RunConfig};
pub use kernels::{KernelParams, SpaceTimePoint};
pub use scalar::Scalar;
pub use theory::{huber_influence_bound, influence_curve, pseudo_true_rho, score_rho, BoundReport, InfluenceCurve};

pub type Point = SpaceTimePoint<f64>;
pub type Kernel = KernelParams<f64>;
pub type Params = ModelParams<f64>;
pub type Dataset = FidelityDataset<f64>;
