//! Co-kriging prediction from the joint two-fidelity model and gridded export.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{jittered_cholesky_ctx, JitteredCholesky, ModelParams, DEFAULT_JITTER};
use crate::dataset::FidelityDataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_unchecked, SpaceTimePoint};
use crate::likelihood::joint_sigma;
use crate::scalar::Scalar;

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub points: Vec<SpaceTimePoint<T>>,
    pub mean: Vec<T>,
    pub variance: Vec<T>,
    /// Number of negative round-off variances clamped to zero.
    pub clamped: usize,
}

impl<T: Scalar> Prediction<T> {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn sd(&self) -> Vec<T> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Low,
    High,
}

/// Factorized joint training covariance, reusable across query batches.
#[derive(Debug, Clone)]
pub struct Predictor<T: Scalar> {
    theta: ModelParams<T>,
    lf_points: Vec<SpaceTimePoint<T>>,
    hf_points: Vec<SpaceTimePoint<T>>,
    chol: JitteredCholesky<T>,
    alpha: DVector<T>,
    means: (T, T),
}

impl<T: Scalar> Predictor<T> {
    /// Zero prior means.
    pub fn new(dataset: &FidelityDataset<T>, theta: &ModelParams<T>) -> Result<Self> {
        Self::with_means(dataset, theta, (T::zero(), T::zero()))
    }

    /// Constant prior means `(μ_L, μ_H)`.
    pub fn with_means(dataset: &FidelityDataset<T>, theta: &ModelParams<T>, means: (T, T)) -> Result<Self> {
        dataset.validate()?;
        dataset.require_both()?;
        theta.validate()?;
        let sigma = joint_sigma(dataset, theta);
        let chol = jittered_cholesky_ctx(&sigma, T::of(DEFAULT_JITTER), "joint covariance")?;
        let centered: Vec<T> = dataset
            .lf
            .values
            .iter()
            .map(|&v| v - means.0)
            .chain(dataset.hf.values.iter().map(|&v| v - means.1))
            .collect();
        let alpha = chol.solve(&DVector::from_vec(centered));
        Ok(Self {
            theta: *theta,
            lf_points: dataset.lf.points.clone(),
            hf_points: dataset.hf.points.clone(),
            chol,
            alpha,
            means,
        })
    }

    pub fn jitter(&self) -> T {
        self.chol.jitter
    }

    /// Posterior of the latent HF field `ρ f_L + δ`.
    pub fn predict_hf(&self, query: &[SpaceTimePoint<T>]) -> Result<Prediction<T>> {
        self.predict(query, Target::High)
    }

    /// Posterior of the latent LF field `f_L`.
    pub fn predict_lf(&self, query: &[SpaceTimePoint<T>]) -> Result<Prediction<T>> {
        self.predict(query, Target::Low)
    }

    fn cross(&self, q: &[SpaceTimePoint<T>], target: Target) -> DMatrix<T> {
        let th = &self.theta;
        let rho = th.rho;
        let (nl, nh) = (self.lf_points.len(), self.hf_points.len());
        let mut k = DMatrix::zeros(nl + nh, q.len());
        let kl_l = gram_unchecked(&self.lf_points, q, &th.kernel_l);
        let kl_h = gram_unchecked(&self.hf_points, q, &th.kernel_l);
        match target {
            Target::High => {
                let kd_h = gram_unchecked(&self.hf_points, q, &th.kernel_delta);
                k.view_mut((0, 0), (nl, q.len())).copy_from(&(kl_l * rho));
                k.view_mut((nl, 0), (nh, q.len())).copy_from(&(kl_h * (rho * rho) + kd_h));
            }
            Target::Low => {
                k.view_mut((0, 0), (nl, q.len())).copy_from(&kl_l);
                k.view_mut((nl, 0), (nh, q.len())).copy_from(&(kl_h * rho));
            }
        }
        k
    }

    fn predict(&self, query: &[SpaceTimePoint<T>], target: Target) -> Result<Prediction<T>> {
        if let Some(i) = query.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter(format!("query point {i} is not finite")));
        }
        let (prior, offset) = match target {
            Target::High => (self.theta.hf_prior_variance(), self.means.1),
            Target::Low => (self.theta.kernel_l.signal_variance, self.means.0),
        };
        let parts: Vec<(Vec<T>, Vec<T>, usize)> = query
            .par_chunks(CHUNK)
            .map(|q| {
                let k = self.cross(q, target);
                let mean = k.transpose() * &self.alpha;
                let v = self.chol.solve_lower_mat(&k);
                let mut clamped = 0;
                let var = (0..q.len())
                    .map(|j| {
                        let s = prior - v.column(j).norm_squared();
                        if s < T::zero() {
                            clamped += 1;
                            T::zero()
                        } else {
                            s.min(prior)
                        }
                    })
                    .collect();
                (mean.iter().map(|&m| m + offset).collect(), var, clamped)
            })
            .collect();
        let mut out =
            Prediction { points: query.to_vec(), mean: Vec::new(), variance: Vec::new(), clamped: 0 };
        for (m, v, c) in parts {
            out.mean.extend(m);
            out.variance.extend(v);
            out.clamped += c;
        }
        if out.clamped > 0 {
            log::warn!("clamped {} negative predictive variances to zero", out.clamped);
        }
        Ok(out)
    }
}

/// Posterior mean and variance of the HF field at `query`.
pub fn predict_hf<T: Scalar>(
    dataset: &FidelityDataset<T>,
    theta: &ModelParams<T>,
    query: &[SpaceTimePoint<T>],
) -> Result<Prediction<T>> {
    Predictor::new(dataset, theta)?.predict_hf(query)
}

/// Posterior mean and variance of the LF field at `query`.
pub fn predict_lf<T: Scalar>(
    dataset: &FidelityDataset<T>,
    theta: &ModelParams<T>,
    query: &[SpaceTimePoint<T>],
) -> Result<Prediction<T>> {
    Predictor::new(dataset, theta)?.predict_lf(query)
}

/// Regular lon/lat grid of cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T> {
    pub lon_min: T,
    pub lon_max: T,
    pub lat_min: T,
    pub lat_max: T,
    /// Cells along longitude.
    pub n_lon: usize,
    /// Cells along latitude.
    pub n_lat: usize,
}

impl<T: Scalar> GridSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lon_min, self.lon_max, self.lat_min, self.lat_max].iter().all(|v| v.is_finite());
        if !finite || !(self.lon_min < self.lon_max) || !(self.lat_min < self.lat_max) {
            return Err(Error::InvalidParameter("bounding box must be finite with min < max".into()));
        }
        if self.n_lon == 0 || self.n_lat == 0 {
            return Err(Error::InvalidParameter("grid resolution must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Cell centers, row-major: latitude rows, longitude varying fastest.
    pub fn centers(&self) -> Vec<(T, T)> {
        let dlon = (self.lon_max - self.lon_min) / T::of_usize(self.n_lon);
        let dlat = (self.lat_max - self.lat_min) / T::of_usize(self.n_lat);
        let half = T::of(0.5);
        let mut out = Vec::with_capacity(self.n_lon * self.n_lat);
        for j in 0..self.n_lat {
            for i in 0..self.n_lon {
                out.push((
                    self.lon_min + (T::of_usize(i) + half) * dlon,
                    self.lat_min + (T::of_usize(j) + half) * dlat,
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary<T> {
    pub lon: T,
    pub lat: T,
    /// Mean of the predicted means over time.
    pub temporal_mean: T,
    /// Population standard deviation of the predicted means over time.
    pub temporal_sd: T,
    /// Average predictive standard deviation over time.
    pub mean_predictive_sd: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPrediction<T> {
    pub spec: GridSpec<T>,
    pub times: Vec<T>,
    /// Cell-major (row-major cells), time varying fastest.
    pub prediction: Prediction<T>,
    pub cells: Vec<CellSummary<T>>,
}

/// HF predictions on every grid cell at every time.
pub fn krige_grid<T: Scalar>(
    dataset: &FidelityDataset<T>,
    theta: &ModelParams<T>,
    spec: &GridSpec<T>,
    times: &[T],
) -> Result<GridPrediction<T>> {
    krige_grid_with(&Predictor::new(dataset, theta)?, spec, times)
}

pub fn krige_grid_with<T: Scalar>(
    predictor: &Predictor<T>,
    spec: &GridSpec<T>,
    times: &[T],
) -> Result<GridPrediction<T>> {
    spec.validate()?;
    if times.is_empty() {
        return Err(Error::EmptyInput("prediction times"));
    }
    let centers = spec.centers();
    let query: Vec<SpaceTimePoint<T>> = centers
        .iter()
        .flat_map(|&(lon, lat)| times.iter().map(move |&t| SpaceTimePoint::new(lon, lat, t)))
        .collect();
    let prediction = predictor.predict_hf(&query)?;
    let nt = T::of_usize(times.len());
    let cells = centers
        .iter()
        .enumerate()
        .map(|(c, &(lon, lat))| {
            let m = &prediction.mean[c * times.len()..(c + 1) * times.len()];
            let v = &prediction.variance[c * times.len()..(c + 1) * times.len()];
            let mean = m.iter().fold(T::zero(), |a, &x| a + x) / nt;
            let var = m.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / nt;
            let psd = v.iter().fold(T::zero(), |a, &x| a + x.sqrt()) / nt;
            CellSummary { lon, lat, temporal_mean: mean, temporal_sd: var.sqrt(), mean_predictive_sd: psd }
        })
        .collect();
    Ok(GridPrediction { spec: *spec, times: times.to_vec(), prediction, cells })
}

/// Writes `lon,lat,t,mean,sd`, one row per cell and time.
pub fn write_grid_csv<T: Scalar, W: Write>(grid: &GridPrediction<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lon", "lat", "t", "mean", "sd"])?;
    let p = &grid.prediction;
    for i in 0..p.len() {
        let q = p.points[i];
        w.write_record([
            q.s1.as_f64().to_string(),
            q.s2.as_f64().to_string(),
            q.t.as_f64().to_string(),
            p.mean[i].as_f64().to_string(),
            p.variance[i].sqrt().as_f64().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `lon,lat,temporal_mean,temporal_sd,mean_predictive_sd`, one row per cell.
pub fn write_cell_summary_csv<T: Scalar, W: Write>(grid: &GridPrediction<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lon", "lat", "temporal_mean", "temporal_sd", "mean_predictive_sd"])?;
    for c in &grid.cells {
        w.write_record([
            c.lon.as_f64().to_string(),
            c.lat.as_f64().to_string(),
            c.temporal_mean.as_f64().to_string(),
            c.temporal_sd.as_f64().to_string(),
            c.mean_predictive_sd.as_f64().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Observations, Station};
    use crate::kernels::KernelParams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta(rho: f64) -> ModelParams<f64> {
        ModelParams {
            rho,
            kernel_l: KernelParams::new(2.0, 1.0, 1.0, 0.5),
            kernel_delta: KernelParams::new(0.8, 1.5, 1.5, 0.5),
            tau_l_sq: 0.3,
            tau_h_sq: 0.3,
        }
    }

    fn random_data(nl: usize, nh: usize, seed: u64) -> FidelityDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stations = Vec::new();
        let mut lf = Observations::default();
        let mut hf = Observations::default();
        for i in 0..nl + nh {
            let (s1, s2, t) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0));
            stations.push(Station { id: format!("{i}"), s1, s2 });
            let p = SpaceTimePoint::new(s1, s2, t);
            if i < nl {
                lf.push(p, rng.gen_range(-2.0..2.0), i);
            } else {
                hf.push(p, rng.gen_range(-2.0..2.0), i);
            }
        }
        FidelityDataset { stations, lf, hf }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let d = random_data(5, 3, 1);
        let t = theta(0.6);
        let p = predict_hf(&d, &t, &[SpaceTimePoint::new(1e3, 1e3, 50.0)]).unwrap();
        assert_relative_eq!(p.mean[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.variance[0], 0.36 * 2.0 + 0.8, epsilon = 1e-12);
    }

    #[test]
    fn noise_free_hf_is_interpolated() {
        let d = random_data(4, 3, 2);
        let mut t = theta(0.6);
        t.tau_h_sq = 0.0;
        let p = predict_hf(&d, &t, &d.hf.points).unwrap();
        for i in 0..d.n_hf() {
            assert_relative_eq!(p.mean[i], d.hf.values[i], epsilon = 1e-5);
            assert!(p.variance[i] < 1e-5);
        }
    }

    #[test]
    fn scalar_pair_matches_closed_form() {
        let stations = vec![Station { id: "a".into(), s1: 0.0, s2: 0.0 }];
        let x = SpaceTimePoint::new(0.0, 0.0, 0.0);
        let mut lf = Observations::default();
        lf.push(x, 1.0, 0);
        let mut hf = Observations::default();
        hf.push(x, 0.5, 0);
        let d = FidelityDataset { stations, lf, hf };
        let t = ModelParams {
            rho: 0.6,
            kernel_l: KernelParams::new(2.0, 1.0, 1.0, 1.0),
            kernel_delta: KernelParams::new(0.8, 1.0, 1.0, 1.0),
            tau_l_sq: 0.3,
            tau_h_sq: 0.3,
        };
        // Σ = [[2.3, 1.2], [1.2, 1.82]], k_* = [1.2, 1.52], k_** = 1.52
        let det: f64 = 2.3 * 1.82 - 1.2 * 1.2;
        let inv = [[1.82 / det, -1.2 / det], [-1.2 / det, 2.3 / det]];
        let k = [1.2, 1.52];
        let w = [k[0] * inv[0][0] + k[1] * inv[1][0], k[0] * inv[0][1] + k[1] * inv[1][1]];
        let mean = w[0] * 1.0 + w[1] * 0.5;
        let var = 1.52 - (w[0] * k[0] + w[1] * k[1]);
        let p = predict_hf(&d, &t, &[x]).unwrap();
        assert_relative_eq!(p.mean[0], mean, epsilon = 1e-12);
        assert_relative_eq!(p.variance[0], var, epsilon = 1e-12);
    }

    #[test]
    fn variance_does_not_grow_with_more_data() {
        let d = random_data(6, 4, 3);
        let t = theta(0.7);
        let q: Vec<_> = (0..10).map(|i| SpaceTimePoint::new(i as f64 * 0.3, 1.5, 0.5)).collect();
        let full = predict_hf(&d, &t, &q).unwrap();
        let less = d.filter(|i| i > 0, |_| true);
        let fewer = predict_hf(&less, &t, &q).unwrap();
        for i in 0..q.len() {
            assert!(full.variance[i] <= fewer.variance[i] + 1e-10);
        }
    }

    #[test]
    fn zero_rho_lf_prediction_is_single_fidelity() {
        let d = random_data(6, 3, 4);
        let t = theta(0.0);
        let q = [SpaceTimePoint::new(1.0, 1.0, 0.2), SpaceTimePoint::new(2.0, 0.5, 0.9)];
        let joint = predict_lf(&d, &t, &q).unwrap();
        let mut s = crate::kernels::symmetric_gram(&d.lf.points, &t.kernel_l).unwrap();
        for i in 0..s.nrows() {
            s[(i, i)] += t.tau_l_sq;
        }
        let k = crate::kernels::separable_gram(&d.lf.points, &q, &t.kernel_l).unwrap();
        let sinv = s.try_inverse().unwrap();
        let y = DVector::from_column_slice(&d.lf.values);
        let mean = k.transpose() * &sinv * y;
        let var = (k.transpose() * &sinv * &k).diagonal();
        for i in 0..2 {
            assert_relative_eq!(joint.mean[i], mean[i], epsilon = 1e-9);
            assert_relative_eq!(joint.variance[i], 2.0 - var[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_field_is_reproduced() {
        let mut d = random_data(8, 4, 5);
        d.lf.values.iter_mut().for_each(|v| *v = 3.0);
        d.hf.values.iter_mut().for_each(|v| *v = 3.0);
        let t = theta(1.0);
        let pred = Predictor::with_means(&d, &t, (3.0, 3.0)).unwrap();
        let spec = GridSpec { lon_min: 0.0, lon_max: 3.0, lat_min: 0.0, lat_max: 3.0, n_lon: 4, n_lat: 3 };
        let g = krige_grid_with(&pred, &spec, &[0.1, 0.5]).unwrap();
        assert_eq!(g.prediction.len(), 24);
        assert!(g.cells.iter().all(|c| (c.temporal_mean - 3.0).abs() < 1e-12 && c.temporal_sd < 1e-12));
    }

    #[test]
    fn single_cell_grid_matches_point_prediction() {
        let d = random_data(5, 3, 6);
        let t = theta(0.6);
        let p0 = d.hf.points[0];
        let spec = GridSpec { lon_min: p0.s1 - 0.1, lon_max: p0.s1 + 0.1, lat_min: p0.s2 - 0.2, lat_max: p0.s2 + 0.2, n_lon: 1, n_lat: 1 };
        let g = krige_grid(&d, &t, &spec, &[p0.t]).unwrap();
        let p = predict_hf(&d, &t, &[p0]).unwrap();
        assert_relative_eq!(g.prediction.mean[0], p.mean[0], epsilon = 1e-12);
        assert_relative_eq!(g.prediction.variance[0], p.variance[0], epsilon = 1e-12);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        let d = random_data(3, 2, 7);
        let t = theta(0.6);
        let spec = GridSpec { lon_min: 0.0, lon_max: 1.0, lat_min: 0.0, lat_max: 1.0, n_lon: 2, n_lat: 2 };
        assert!(krige_grid(&d, &t, &spec, &[]).is_err());
        let bad = GridSpec { lon_max: -1.0, ..spec };
        assert!(krige_grid(&d, &t, &bad, &[0.0]).is_err());
    }

    #[test]
    fn grid_csv_layout() {
        let d = random_data(3, 2, 8);
        let spec = GridSpec { lon_min: 0.0, lon_max: 2.0, lat_min: 0.0, lat_max: 1.0, n_lon: 2, n_lat: 1 };
        let g = krige_grid(&d, &theta(0.5), &spec, &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "lon,lat,t,mean,sd");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0.5,0.5,0,"));
        assert!(lines[3].starts_with("1.5,0.5,0,"));
    }

    proptest! {
        #[test]
        fn mean_is_linear_in_data(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..200) {
            let d1 = random_data(4, 3, seed);
            let d2 = random_data(4, 3, seed + 1000);
            let d2 = FidelityDataset { stations: d1.stations.clone(), lf: Observations { values: d2.lf.values, ..d1.lf.clone() }, hf: Observations { values: d2.hf.values, ..d1.hf.clone() } };
            let combo = d1
                .with_lf_values(d1.lf.values.iter().zip(&d2.lf.values).map(|(x, y)| a * x + b * y).collect())
                .with_hf_values(d1.hf.values.iter().zip(&d2.hf.values).map(|(x, y)| a * x + b * y).collect());
            let t = theta(0.6);
            let q = [SpaceTimePoint::new(1.0, 2.0, 0.3)];
            let p1 = predict_hf(&d1, &t, &q).unwrap().mean[0];
            let p2 = predict_hf(&d2, &t, &q).unwrap().mean[0];
            let pc = predict_hf(&combo, &t, &q).unwrap().mean[0];
            prop_assert!((pc - (a * p1 + b * p2)).abs() < 1e-9);
        }
    }
}
