//! Separable spatiotemporal two-fidelity data generator, contamination, and
//! the Monte Carlo comparison of Gaussian and Huber fits.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{jittered_cholesky_ctx, ModelParams};
use crate::dataset::{FidelityDataset, Observations, Station};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, HuberConfig, Loss, ParamLayout};
use crate::evaluation::{mae, relative_efficiency, rmse};
use crate::kernels::{lengthscale_from_correlation, KernelParams, SpaceTimePoint};
use crate::prediction::Predictor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// Stations on a `grid_side × grid_side` integer lattice `{1..grid_side}²`.
    pub grid_side: usize,
    /// Equispaced times on `[0, 1]`.
    pub n_times: usize,
    pub sigma_l_sq: f64,
    pub sigma_delta_sq: f64,
    /// LF noise variance.
    pub noise_l: f64,
    /// Discrepancy noise variance.
    pub noise_delta: f64,
    pub rho: f64,
    /// One-step temporal correlation (both processes).
    pub c_t: f64,
    /// Nearest-neighbour spatial correlation of the LF process.
    pub c_s_l: f64,
    /// Nearest-neighbour spatial correlation of the discrepancy.
    pub c_s_delta: f64,
    pub jitter: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            grid_side: 4,
            n_times: 15,
            sigma_l_sq: 2.0,
            sigma_delta_sq: 0.8,
            noise_l: 0.3,
            noise_delta: 0.3,
            rho: 0.6,
            c_t: 0.8,
            c_s_l: 0.8,
            c_s_delta: 0.95,
            jitter: 1e-8,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 || self.n_times < 2 {
            return Err(Error::InvalidParameter("need grid_side >= 1 and n_times >= 2".into()));
        }
        for (name, v) in [("sigma_l_sq", self.sigma_l_sq), ("sigma_delta_sq", self.sigma_delta_sq)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [("noise_l", self.noise_l), ("noise_delta", self.noise_delta), ("jitter", self.jitter)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        for (name, v) in [
            ("c_t", self.c_t),
            ("c_s_l", self.c_s_l),
            ("c_s_delta", self.c_s_delta),
            ("train_fraction", self.train_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1)")));
            }
        }
        if !self.rho.is_finite() {
            return Err(Error::InvalidParameter("rho must be finite".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.n_times - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times).map(|k| k as f64 * self.dt()).collect()
    }

    /// Lattice sites in station order (`s1` outer, `s2` inner).
    pub fn sites(&self) -> Vec<(f64, f64)> {
        let g = self.grid_side;
        (0..g * g).map(|j| ((j / g + 1) as f64, (j % g + 1) as f64)).collect()
    }

    /// Generating parameters expressed as model parameters.
    pub fn true_params(&self) -> Result<ModelParams<f64>> {
        self.validate()?;
        let lt = lengthscale_from_correlation(self.dt(), self.c_t)?;
        let ll = lengthscale_from_correlation(1.0, self.c_s_l)?;
        let ld = lengthscale_from_correlation(1.0, self.c_s_delta)?;
        Ok(ModelParams {
            rho: self.rho,
            kernel_l: KernelParams::isotropic_space(self.sigma_l_sq, ll, lt),
            kernel_delta: KernelParams::isotropic_space(self.sigma_delta_sq, ld, lt),
            tau_l_sq: self.noise_l,
            tau_h_sq: self.noise_delta,
        })
    }
}

/// Simulated observations together with the latent draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulated {
    pub dataset: FidelityDataset<f64>,
    /// `d_L` in row order.
    pub latent_l: Vec<f64>,
    /// `d_δ` in row order.
    pub latent_delta: Vec<f64>,
    pub noise_l: Vec<f64>,
    pub noise_delta: Vec<f64>,
}

fn draw_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws one dataset. Rows are station-major with time varying fastest; both
/// fidelities are observed at every station and time.
pub fn simulate_mf(config: &DgpConfig) -> Result<Simulated> {
    let theta = config.true_params()?;
    let sites = config.sites();
    let times = config.times();
    let (ns, nt) = (sites.len(), times.len());
    let n = ns * nt;
    let points: Vec<SpaceTimePoint<f64>> =
        sites.iter().flat_map(|&(a, b)| times.iter().map(move |&t| SpaceTimePoint::new(a, b, t))).collect();

    let factor = |k: &KernelParams<f64>, ctx: &'static str| -> Result<DMatrix<f64>> {
        let mut m = crate::kernels::symmetric_gram_unchecked(&points, k);
        for i in 0..n {
            m[(i, i)] += config.jitter;
        }
        Ok(jittered_cholesky_ctx(&m, config.jitter.max(1e-12), ctx)?.l())
    };
    let l_l = factor(&theta.kernel_l, "LF latent covariance")?;
    let l_d = factor(&theta.kernel_delta, "discrepancy latent covariance")?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d_l = &l_l * draw_normal(&mut rng, n);
    let d_d = &l_d * draw_normal(&mut rng, n);
    let e_l = draw_normal(&mut rng, n) * config.noise_l.sqrt();
    let e_d = draw_normal(&mut rng, n) * config.noise_delta.sqrt();

    let f_l = &d_l + &e_l;
    let f_h = &f_l * config.rho + &d_d + &e_d;

    let stations: Vec<Station<f64>> = sites
        .iter()
        .enumerate()
        .map(|(j, &(s1, s2))| Station { id: format!("s{:02}", j + 1), s1, s2 })
        .collect();
    let station: Vec<usize> = (0..n).map(|i| i / nt).collect();
    let dataset = FidelityDataset {
        stations,
        lf: Observations { points: points.clone(), values: f_l.as_slice().to_vec(), station: station.clone() },
        hf: Observations { points, values: f_h.as_slice().to_vec(), station },
    };
    Ok(Simulated {
        dataset,
        latent_l: d_l.as_slice().to_vec(),
        latent_delta: d_d.as_slice().to_vec(),
        noise_l: e_l.as_slice().to_vec(),
        noise_delta: e_d.as_slice().to_vec(),
    })
}

/// How an outlier perturbation is drawn for a selected LF row, with `s = sd(y_L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMechanism {
    /// `±m·s` with equiprobable sign.
    #[default]
    SignedShift,
    /// `m·s·Z`, `Z ~ N(0, 1)`.
    GaussianShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationChoice {
    Ids(Vec<String>),
    /// Stations drawn uniformly without replacement.
    Random(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContaminationSpec {
    Outlier {
        magnitude: f64,
        frequency: f64,
        #[serde(default)]
        mechanism: OutlierMechanism,
        seed: u64,
    },
    LevelShift {
        magnitude: f64,
        changepoint: f64,
        stations: StationChoice,
        seed: u64,
    },
    /// Adds `magnitude·sd(y_L)` to a single LF row.
    SingleOutlier { magnitude: f64, row: usize },
}

impl ContaminationSpec {
    pub fn apply(&self, dataset: &FidelityDataset<f64>) -> Result<Contaminated> {
        match self {
            ContaminationSpec::Outlier { magnitude, frequency, mechanism, seed } => {
                inject_outliers_with(dataset, *magnitude, *frequency, *mechanism, *seed)
            }
            ContaminationSpec::LevelShift { magnitude, changepoint, stations, seed } => {
                let idx = match stations {
                    StationChoice::Ids(ids) => ids
                        .iter()
                        .map(|id| {
                            dataset
                                .station_index(id)
                                .ok_or_else(|| Error::InvalidParameter(format!("unknown station '{id}'")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                    StationChoice::Random(k) => {
                        let lf_stations = dataset.lf.station_set();
                        if *k == 0 || *k > lf_stations.len() {
                            return Err(Error::InvalidParameter(format!(
                                "cannot draw {k} of {} LF stations",
                                lf_stations.len()
                            )));
                        }
                        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                        let mut v: Vec<usize> =
                            sample(&mut rng, lf_stations.len(), *k).into_iter().map(|i| lf_stations[i]).collect();
                        v.sort_unstable();
                        v
                    }
                };
                inject_level_shift(dataset, *magnitude, *changepoint, &idx)
            }
            ContaminationSpec::SingleOutlier { magnitude, row } => {
                if *row >= dataset.n_lf() {
                    return Err(Error::InvalidParameter(format!("LF row {row} out of range")));
                }
                if !magnitude.is_finite() {
                    return Err(Error::InvalidParameter("outlier magnitude must be finite".into()));
                }
                let shift = magnitude * dataset.lf.sd().unwrap_or(0.0);
                let mut out = dataset.clone();
                let mut mask = vec![false; dataset.n_lf()];
                if shift != 0.0 {
                    out.lf.values[*row] += shift;
                    mask[*row] = true;
                }
                Ok(Contaminated { dataset: out, mask })
            }
        }
    }

    pub fn magnitude(&self) -> f64 {
        match self {
            ContaminationSpec::Outlier { magnitude, .. }
            | ContaminationSpec::LevelShift { magnitude, .. }
            | ContaminationSpec::SingleOutlier { magnitude, .. } => *magnitude,
        }
    }

    /// Copy of the spec with its magnitude replaced.
    pub fn with_magnitude(&self, m: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ContaminationSpec::Outlier { magnitude, .. }
            | ContaminationSpec::LevelShift { magnitude, .. }
            | ContaminationSpec::SingleOutlier { magnitude, .. } => *magnitude = m,
        }
        out
    }
}

/// Contaminated dataset and the mask of perturbed LF rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contaminated {
    pub dataset: FidelityDataset<f64>,
    pub mask: Vec<bool>,
}

impl Contaminated {
    pub fn n_contaminated(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Perturbs each LF value independently with probability `eta` by `±m·sd(y_L)`.
pub fn inject_outliers(dataset: &FidelityDataset<f64>, m: f64, eta: f64, seed: u64) -> Result<Contaminated> {
    inject_outliers_with(dataset, m, eta, OutlierMechanism::SignedShift, seed)
}

pub fn inject_outliers_with(
    dataset: &FidelityDataset<f64>,
    m: f64,
    eta: f64,
    mechanism: OutlierMechanism,
    seed: u64,
) -> Result<Contaminated> {
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::InvalidParameter(format!("outlier magnitude must be >= 0, got {m}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!("outlier frequency must lie in [0, 1], got {eta}")));
    }
    let sd = dataset.lf.sd().unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    let mut mask = vec![false; dataset.n_lf()];
    for (i, v) in out.lf.values.iter_mut().enumerate() {
        let hit = rng.gen_bool(eta);
        let z: f64 = match mechanism {
            OutlierMechanism::SignedShift => {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
            OutlierMechanism::GaussianShift => rng.sample(StandardNormal),
        };
        let shift = m * sd * z;
        if hit && shift != 0.0 {
            *v += shift;
            mask[i] = true;
        }
    }
    Ok(Contaminated { dataset: out, mask })
}

/// Adds `delta` to LF rows with `t > tau` at the given station indices.
pub fn inject_level_shift(
    dataset: &FidelityDataset<f64>,
    delta: f64,
    tau: f64,
    stations: &[usize],
) -> Result<Contaminated> {
    if stations.is_empty() {
        return Err(Error::EmptyInput("level-shift stations"));
    }
    if !delta.is_finite() || !tau.is_finite() {
        return Err(Error::InvalidParameter("level shift and change point must be finite".into()));
    }
    if let Some(&s) = stations.iter().find(|&&s| s >= dataset.stations.len()) {
        return Err(Error::InvalidParameter(format!("station index {s} out of range")));
    }
    let mut out = dataset.clone();
    let mut mask = vec![false; dataset.n_lf()];
    for i in 0..dataset.n_lf() {
        if stations.contains(&dataset.lf.station[i]) && dataset.lf.points[i].t > tau && delta != 0.0 {
            out.lf.values[i] += delta;
            mask[i] = true;
        }
    }
    Ok(Contaminated { dataset: out, mask })
}

/// Assigns whole stations: `⌊fraction · n⌋` to training, the rest to testing.
/// Returns sorted station indices.
pub fn station_split(n_stations: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let k = (fraction * n_stations as f64).floor() as usize;
    if k == 0 || k == n_stations {
        return Err(Error::InvalidParameter(format!(
            "fraction {fraction} of {n_stations} stations leaves an empty side"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<usize> = sample(&mut rng, n_stations, k).into_vec();
    train.sort_unstable();
    let test = (0..n_stations).filter(|s| !train.contains(s)).collect();
    Ok((train, test))
}

/// Training data (both fidelities at `train` stations, plus LF at test stations
/// when requested) and the HF rows at `test` stations.
pub fn split_dataset(
    dataset: &FidelityDataset<f64>,
    train: &[usize],
    test: &[usize],
    lf_at_test_stations: bool,
) -> (FidelityDataset<f64>, Observations<f64>) {
    let tr = dataset.filter(
        |i| train.contains(&dataset.lf.station[i]) || (lf_at_test_stations && test.contains(&dataset.lf.station[i])),
        |i| train.contains(&dataset.hf.station[i]),
    );
    let te = dataset.hf.filter_rows(|i| test.contains(&dataset.hf.station[i]));
    (tr, te)
}

/// Random start: every positive parameter of `truth` scaled by a log-uniform
/// factor in `[1/spread, spread]`, `ρ ~ U(rho_range)`.
pub fn random_init(truth: &ModelParams<f64>, spread: f64, rho_range: (f64, f64), rng: &mut impl Rng) -> ModelParams<f64> {
    let ls = spread.max(1.0).ln();
    let mut f = |v: f64| if ls > 0.0 { v * rng.gen_range(-ls..=ls).exp() } else { v };
    let k = |f: &mut dyn FnMut(f64) -> f64, p: &KernelParams<f64>| {
        KernelParams::new(f(p.signal_variance), f(p.lengthscale_s1), f(p.lengthscale_s2), f(p.lengthscale_t))
    };
    let kernel_l = k(&mut f, &truth.kernel_l);
    let kernel_delta = k(&mut f, &truth.kernel_delta);
    let tau_l_sq = f(truth.tau_l_sq);
    let tau_h_sq = f(truth.tau_h_sq);
    let rho = if rho_range.1 > rho_range.0 { rng.gen_range(rho_range.0..rho_range.1) } else { rho_range.0 };
    ModelParams { rho, kernel_l, kernel_delta, tau_l_sq, tau_h_sq }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Gaussian,
    Huber,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Gaussian => "gaussian",
            EstimatorKind::Huber => "huber",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub magnitudes: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub n_runs: usize,
    pub base_seed: u64,
    pub mechanism: OutlierMechanism,
    pub huber: HuberConfig<f64>,
    pub fit: FitOptions,
    /// Log-scale spread of the random initialization.
    pub init_spread: f64,
    pub init_rho_range: (f64, f64),
    /// Keep LF rows of the test stations in the training data.
    pub lf_at_test_stations: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig { train_fraction: 0.8, ..DgpConfig::default() },
            magnitudes: vec![2.0, 5.0, 10.0],
            frequencies: vec![0.1, 0.3, 0.5],
            n_runs: 100,
            base_seed: 1,
            mechanism: OutlierMechanism::SignedShift,
            huber: HuberConfig::default(),
            fit: FitOptions { layout: ParamLayout { tie_spatial: false, share_temporal: true }, ..FitOptions::default() },
            init_spread: 2.0,
            init_rho_range: (0.3, 0.9),
            lf_at_test_stations: false,
        }
    }
}

/// One estimator on one replication of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub magnitude: f64,
    pub frequency: f64,
    pub rep: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub mae: f64,
    pub rmse: f64,
    pub rho_hat: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub rmse: f64,
    pub mae_se: f64,
    pub rmse_se: f64,
    pub rho_hat: f64,
    pub rho_hat_se: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub n_not_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub magnitude: f64,
    pub frequency: f64,
    pub gaussian: MetricSummary,
    pub huber: MetricSummary,
    /// `(RMSE_gaussian / RMSE_huber)²` from the cell mean RMSEs.
    pub eff_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub scenarios: Vec<ScenarioSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl McReport {
    pub fn scenario(&self, magnitude: f64, frequency: f64) -> Option<&ScenarioSummary> {
        self.scenarios.iter().find(|s| s.magnitude == magnitude && s.frequency == frequency)
    }

    /// Per-replication ledger.
    pub fn write_ledger_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "eta", "rep", "seed", "estimator", "mae", "rmse", "rho_hat", "converged", "n_iter", "error"])?;
        for r in &self.records {
            w.write_record([
                r.magnitude.to_string(),
                r.frequency.to_string(),
                r.rep.to_string(),
                r.seed.to_string(),
                r.estimator.label().to_string(),
                r.mae.to_string(),
                r.rmse.to_string(),
                r.rho_hat.to_string(),
                r.converged.to_string(),
                r.n_iter.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per scenario with classical and robust aggregates.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "m",
            "eta",
            "classic_mae",
            "classic_rmse",
            "classic_mae_se",
            "classic_rmse_se",
            "robust_mae",
            "robust_rmse",
            "robust_mae_se",
            "robust_rmse_se",
            "eff_rel",
            "classic_failed",
            "robust_failed",
        ])?;
        for s in &self.scenarios {
            let g = &s.gaussian;
            let h = &s.huber;
            w.write_record(
                [s.magnitude, s.frequency, g.mae, g.rmse, g.mae_se, g.rmse_se, h.mae, h.rmse, h.mae_se, h.rmse_se, s.eff_rel]
                    .iter()
                    .map(|v| v.to_string())
                    .chain([g.n_failed.to_string(), h.n_failed.to_string()]),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

fn summarize(records: &[&ReplicationRecord]) -> MetricSummary {
    let ok: Vec<&&ReplicationRecord> = records.iter().filter(|r| r.ok()).collect();
    let maes: Vec<f64> = ok.iter().map(|r| r.mae).collect();
    let rmses: Vec<f64> = ok.iter().map(|r| r.rmse).collect();
    let rhos: Vec<f64> = ok.iter().map(|r| r.rho_hat).collect();
    let (mae, mae_se) = mean_se(&maes);
    let (rmse, rmse_se) = mean_se(&rmses);
    let (rho_hat, rho_hat_se) = mean_se(&rhos);
    MetricSummary {
        mae,
        rmse,
        mae_se,
        rmse_se,
        rho_hat,
        rho_hat_se,
        n_ok: ok.len(),
        n_failed: records.len() - ok.len(),
        n_not_converged: ok.iter().filter(|r| !r.converged).count(),
    }
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(cell as u64 + 1)
}

/// Fits both estimators on one replication of one scenario.
pub fn run_replication(
    cfg: &McConfig,
    magnitude: f64,
    frequency: f64,
    cell: usize,
    rep: usize,
) -> Result<[ReplicationRecord; 2]> {
    let seed = cfg.base_seed + rep as u64;
    let sim = simulate_mf(&DgpConfig { seed, ..cfg.dgp.clone() })?;
    let truth = cfg.dgp.true_params()?;
    let contaminated =
        inject_outliers_with(&sim.dataset, magnitude, frequency, cfg.mechanism, cell_seed(seed, cell))?;
    let (train, test) = station_split(sim.dataset.stations.len(), cfg.dgp.train_fraction, seed)?;
    let (train_data, test_hf) = split_dataset(&contaminated.dataset, &train, &test, cfg.lf_at_test_stations);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1417);
    let init = random_init(&truth, cfg.init_spread, cfg.init_rho_range, &mut rng);

    let run = |kind: EstimatorKind| -> ReplicationRecord {
        let loss = match kind {
            EstimatorKind::Gaussian => Loss::Gaussian,
            EstimatorKind::Huber => Loss::Huber(cfg.huber),
        };
        let base = ReplicationRecord {
            magnitude,
            frequency,
            rep,
            seed,
            estimator: kind,
            mae: f64::NAN,
            rmse: f64::NAN,
            rho_hat: f64::NAN,
            converged: false,
            n_iter: 0,
            error: None,
        };
        let outcome = fit(&train_data, &init, &loss, &cfg.fit).and_then(|res| {
            let pred = Predictor::with_means(&train_data, &res.theta_hat, res.mean_offset)?.predict_hf(&test_hf.points)?;
            Ok((res, mae(&pred.mean, &test_hf.values)?, rmse(&pred.mean, &test_hf.values)?))
        });
        match outcome {
            Ok((res, a, r)) => ReplicationRecord {
                mae: a,
                rmse: r,
                rho_hat: res.theta_hat.rho,
                converged: res.converged,
                n_iter: res.n_iter,
                ..base
            },
            Err(e) => {
                log::warn!("m={magnitude} eta={frequency} rep={rep} {}: {e}", kind.label());
                ReplicationRecord { error: Some(e.to_string()), ..base }
            }
        }
    };
    Ok([run(EstimatorKind::Gaussian), run(EstimatorKind::Huber)])
}

/// Runs every `(m, η)` cell for `n_runs` replications with seeds `base_seed + rep`.
pub fn run_mc_study(cfg: &McConfig) -> Result<McReport> {
    cfg.dgp.validate()?;
    cfg.huber.validate()?;
    if cfg.n_runs == 0 {
        return Err(Error::InvalidParameter("n_runs must be >= 1".into()));
    }
    if cfg.magnitudes.is_empty() || cfg.frequencies.is_empty() {
        return Err(Error::EmptyInput("scenario grid"));
    }
    let cells: Vec<(usize, f64, f64)> = cfg
        .magnitudes
        .iter()
        .flat_map(|&m| cfg.frequencies.iter().map(move |&e| (m, e)))
        .enumerate()
        .map(|(i, (m, e))| (i, m, e))
        .collect();
    let jobs: Vec<(usize, f64, f64, usize)> =
        cells.iter().flat_map(|&(c, m, e)| (0..cfg.n_runs).map(move |r| (c, m, e, r))).collect();
    let results: Vec<Result<[ReplicationRecord; 2]>> =
        jobs.par_iter().map(|&(c, m, e, r)| run_replication(cfg, m, e, c, r)).collect();
    let mut records = Vec::with_capacity(jobs.len() * 2);
    for r in results {
        records.extend(r?);
    }

    let mut scenarios = Vec::with_capacity(cells.len());
    for &(_, m, e) in &cells {
        let pick = |k: EstimatorKind| -> Vec<&ReplicationRecord> {
            records.iter().filter(|r| r.magnitude == m && r.frequency == e && r.estimator == k).collect()
        };
        let gaussian = summarize(&pick(EstimatorKind::Gaussian));
        let huber = summarize(&pick(EstimatorKind::Huber));
        if gaussian.n_ok == 0 || huber.n_ok == 0 {
            return Err(Error::Optimization(format!("every replication failed for an estimator in cell m={m}, eta={e}")));
        }
        let eff_rel = relative_efficiency(gaussian.rmse, huber.rmse).unwrap_or(f64::NAN);
        scenarios.push(ScenarioSummary { magnitude: m, frequency: e, gaussian, huber, eff_rel });
    }
    Ok(McReport { scenarios, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn layout_and_sizes() {
        let cfg = DgpConfig::default();
        let sim = simulate_mf(&cfg).unwrap();
        let d = &sim.dataset;
        assert_eq!(d.n_lf(), 240);
        assert_eq!(d.n_hf(), 240);
        assert_eq!(d.stations.len(), 16);
        assert_eq!(d.lf.points[0], SpaceTimePoint::new(1.0, 1.0, 0.0));
        assert_eq!(d.lf.points[1].t, 1.0 / 14.0);
        assert_eq!(d.lf.points[15], SpaceTimePoint::new(1.0, 2.0, 0.0));
        assert_eq!(d.lf.station[15], 1);
        d.validate().unwrap();
        for i in 0..240 {
            let fl = sim.latent_l[i] + sim.noise_l[i];
            assert_relative_eq!(d.lf.values[i], fl, epsilon = 1e-12);
            assert_relative_eq!(d.hf.values[i], 0.6 * fl + sim.latent_delta[i] + sim.noise_delta[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = DgpConfig { seed: 7, ..Default::default() };
        let a = simulate_mf(&cfg).unwrap();
        let b = simulate_mf(&cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_mf(&DgpConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.dataset.lf.values, c.dataset.lf.values);
    }

    #[test]
    fn true_params_follow_correlation_targets() {
        let t = DgpConfig::default().true_params().unwrap();
        assert_relative_eq!(t.kernel_l.eval_spatial((1.0, 1.0), (2.0, 1.0)) / 2.0, 0.8, epsilon = 1e-12);
        assert_relative_eq!(t.kernel_delta.eval_spatial((1.0, 1.0), (1.0, 2.0)) / 0.8, 0.95, epsilon = 1e-12);
        assert_relative_eq!(t.kernel_l.eval_temporal(0.0, 1.0 / 14.0), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DgpConfig { c_t: 1.0, ..Default::default() }.validate().is_err());
        assert!(DgpConfig { sigma_l_sq: 0.0, ..Default::default() }.validate().is_err());
        assert!(DgpConfig { train_fraction: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trivial_contamination_is_identity() {
        let d = simulate_mf(&DgpConfig::default()).unwrap().dataset;
        let a = inject_outliers(&d, 5.0, 0.0, 1).unwrap();
        assert_eq!(a.dataset, d);
        assert_eq!(a.n_contaminated(), 0);
        let b = inject_outliers(&d, 0.0, 1.0, 1).unwrap();
        assert_eq!(b.dataset, d);
        let c = inject_level_shift(&d, 0.0, 0.5, &[0]).unwrap();
        assert_eq!(c.dataset, d);
        let e = inject_level_shift(&d, 3.0, 2.0, &[0]).unwrap();
        assert_eq!(e.dataset, d);
        assert!(inject_level_shift(&d, 1.0, 0.5, &[]).is_err());
    }

    #[test]
    fn outliers_hit_only_masked_rows() {
        let d = simulate_mf(&DgpConfig::default()).unwrap().dataset;
        let sd = d.lf.sd().unwrap();
        let c = inject_outliers(&d, 10.0, 0.5, 3).unwrap();
        let k = c.n_contaminated();
        assert!((80..=160).contains(&k), "{k}");
        for i in 0..d.n_lf() {
            let diff = c.dataset.lf.values[i] - d.lf.values[i];
            if c.mask[i] {
                assert_relative_eq!(diff.abs(), 10.0 * sd, epsilon = 1e-9);
            } else {
                assert_eq!(c.dataset.lf.values[i].to_bits(), d.lf.values[i].to_bits());
            }
        }
        assert_eq!(c.dataset.hf, d.hf);
    }

    #[test]
    fn level_shift_hits_exact_rows() {
        let d = simulate_mf(&DgpConfig::default()).unwrap().dataset;
        let c = inject_level_shift(&d, 4.0, 0.5, &[2, 5]).unwrap();
        for i in 0..d.n_lf() {
            let expect = [2, 5].contains(&d.lf.station[i]) && d.lf.points[i].t > 0.5;
            assert_eq!(c.mask[i], expect);
            let want = if expect { d.lf.values[i] + 4.0 } else { d.lf.values[i] };
            assert_eq!(c.dataset.lf.values[i], want);
        }
        assert_eq!(c.n_contaminated(), 2 * 7);
        let spec = ContaminationSpec::LevelShift {
            magnitude: 4.0,
            changepoint: 0.5,
            stations: StationChoice::Ids(vec!["s03".into(), "s06".into()]),
            seed: 0,
        };
        assert_eq!(spec.apply(&d).unwrap(), c);
        let random = ContaminationSpec::LevelShift {
            magnitude: 1.0,
            changepoint: 0.0,
            stations: StationChoice::Random(3),
            seed: 11,
        };
        assert_eq!(random.apply(&d).unwrap().n_contaminated(), 3 * 14);
    }

    #[test]
    fn station_split_sizes() {
        let (tr, te) = station_split(16, 0.8, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (12, 4));
        let (tr, te) = station_split(16, 0.5, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 8));
        assert_eq!(station_split(16, 0.5, 4).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(station_split(16, 0.01, 0).is_err());
        assert!(station_split(16, 1.0, 0).is_err());
    }

    #[test]
    fn split_dataset_keeps_whole_stations() {
        let d = simulate_mf(&DgpConfig::default()).unwrap().dataset;
        let (tr, te) = station_split(16, 0.8, 2).unwrap();
        let (train, test) = split_dataset(&d, &tr, &te, false);
        assert_eq!(train.n_lf(), 12 * 15);
        assert_eq!(train.n_hf(), 12 * 15);
        assert_eq!(test.len(), 4 * 15);
        assert!(test.station.iter().all(|s| te.contains(s)));
        let (train, _) = split_dataset(&d, &tr, &te, true);
        assert_eq!(train.n_lf(), 240);
    }

    #[test]
    fn random_init_bounds() {
        let truth = DgpConfig::default().true_params().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random_init(&truth, 2.0, (0.3, 0.9), &mut rng);
            assert!((0.3..0.9).contains(&p.rho));
            let r = p.kernel_l.signal_variance / truth.kernel_l.signal_variance;
            assert!((0.5 - 1e-12..=2.0 + 1e-12).contains(&r));
            p.validate().unwrap();
        }
    }

    #[test]
    fn tiny_mc_study_runs() {
        let cfg = McConfig {
            dgp: DgpConfig { grid_side: 3, n_times: 5, train_fraction: 0.7, ..DgpConfig::default() },
            magnitudes: vec![5.0],
            frequencies: vec![0.2],
            n_runs: 2,
            ..McConfig::default()
        };
        let report = run_mc_study(&cfg).unwrap();
        assert_eq!(report.scenarios.len(), 1);
        assert_eq!(report.records.len(), 4);
        let s = &report.scenarios[0];
        assert!(s.eff_rel > 0.0);
        let mut buf = Vec::new();
        report.write_ledger_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn outlier_rows_partition(eta in 0.0f64..1.0, m in 0.0f64..20.0, seed in 0u64..1000) {
            let cfg = DgpConfig { grid_side: 2, n_times: 4, ..DgpConfig::default() };
            let d = simulate_mf(&cfg).unwrap().dataset;
            let c = inject_outliers(&d, m, eta, seed).unwrap();
            for i in 0..d.n_lf() {
                if !c.mask[i] {
                    prop_assert_eq!(c.dataset.lf.values[i].to_bits(), d.lf.values[i].to_bits());
                } else {
                    prop_assert!(c.dataset.lf.values[i] != d.lf.values[i]);
                }
            }
        }
    }
}
