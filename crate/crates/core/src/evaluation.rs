//! Error metrics, spatiotemporal block cross-validation, and descriptive tables.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::ModelParams;
use crate::dataset::FidelityDataset;
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, Loss};
use crate::prediction::Predictor;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("metric input"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// `(rmse_classic / rmse_robust)²`; values above 1 favour the robust estimator.
pub fn relative_efficiency(rmse_classic: f64, rmse_robust: f64) -> Result<f64> {
    if !(rmse_classic > 0.0 && rmse_robust > 0.0) || !rmse_classic.is_finite() || !rmse_robust.is_finite() {
        return Err(Error::InvalidParameter("relative efficiency needs finite positive RMSEs".into()));
    }
    Ok((rmse_classic / rmse_robust).powi(2))
}

/// One held-out HF station within one time window. Row indices refer to the full dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvFold {
    /// 1-based window index.
    pub window: usize,
    pub holdout_station: String,
    pub train_lf: Vec<usize>,
    pub train_hf: Vec<usize>,
    pub test_hf: Vec<usize>,
}

/// Fold layout of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_windows: usize,
    /// HF stations in ascending id order.
    pub hf_stations: Vec<String>,
    pub folds: Vec<CvFold>,
    /// `(window, station)` pairs skipped for lack of test rows.
    pub skipped: Vec<(usize, String)>,
}

/// Partitions time into consecutive windows of `window_len` starting at the
/// earliest observation, dropping a partial trailing window. Times are assumed
/// to be on a grid of step `time_unit` (1 for day indices).
pub fn plan_folds(dataset: &FidelityDataset<f64>, window_len: f64, time_unit: f64) -> Result<FoldPlan> {
    dataset.validate()?;
    dataset.require_both()?;
    if !(window_len > 0.0) || !(time_unit > 0.0) {
        return Err(Error::InvalidParameter("window length and time unit must be > 0".into()));
    }
    let times = dataset.lf.points.iter().chain(&dataset.hf.points).map(|p| p.t);
    let (t0, t1) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let tol = 1e-9 * window_len;
    let n_windows = ((t1 - t0 + time_unit + tol) / window_len).floor() as usize;
    if n_windows == 0 {
        return Err(Error::InvalidParameter(format!(
            "time span {} is shorter than one window of {window_len}",
            t1 - t0 + time_unit
        )));
    }
    let window_of = |t: f64| {
        let w = ((t - t0 + tol) / window_len).floor() as usize;
        (w < n_windows).then_some(w)
    };
    let mut hf_idx = dataset.hf.station_set();
    if hf_idx.len() < 2 {
        return Err(Error::InvalidParameter("block CV needs at least two HF stations".into()));
    }
    hf_idx.sort_by(|a, b| dataset.stations[*a].id.cmp(&dataset.stations[*b].id));
    let lf_w: Vec<Option<usize>> = dataset.lf.points.iter().map(|p| window_of(p.t)).collect();
    let hf_w: Vec<Option<usize>> = dataset.hf.points.iter().map(|p| window_of(p.t)).collect();

    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for w in 0..n_windows {
        let train_lf: Vec<usize> = (0..dataset.n_lf()).filter(|&i| lf_w[i] == Some(w)).collect();
        for &s in &hf_idx {
            let id = dataset.stations[s].id.clone();
            let in_w = |i: &usize| hf_w[*i] == Some(w);
            let test_hf: Vec<usize> = (0..dataset.n_hf()).filter(|i| in_w(i) && dataset.hf.station[*i] == s).collect();
            if test_hf.is_empty() {
                log::info!("window {} station {id}: no test rows, fold skipped", w + 1);
                skipped.push((w + 1, id));
                continue;
            }
            let train_hf = (0..dataset.n_hf()).filter(|i| in_w(i) && dataset.hf.station[*i] != s).collect();
            folds.push(CvFold { window: w + 1, holdout_station: id, train_lf: train_lf.clone(), train_hf, test_hf });
        }
    }
    Ok(FoldPlan {
        n_windows,
        hf_stations: hf_idx.iter().map(|&s| dataset.stations[s].id.clone()).collect(),
        folds,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvModel {
    pub name: String,
    pub loss: Loss<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub window_len: f64,
    pub time_unit: f64,
    pub init: ModelParams<f64>,
    pub fit: FitOptions,
    pub models: Vec<CvModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub window: usize,
    pub station: String,
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub n_test: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window: usize,
    pub model: String,
    /// Unweighted mean over the window's successful folds.
    pub mae: f64,
    pub rmse: f64,
    pub n_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub n_folds: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub n_windows: usize,
    pub hf_stations: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub windows: Vec<WindowSummary>,
    pub models: Vec<ModelSummary>,
    pub skipped: Vec<(usize, String)>,
}

impl CvReport {
    /// `window,station,model,mae,rmse`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["window", "station", "model", "mae", "rmse"])?;
        for f in &self.folds {
            w.write_record([f.window.to_string(), f.station.clone(), f.model.clone(), f.mae.to_string(), f.rmse.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn window_mae(&self, model: &str, window: usize) -> Option<f64> {
        self.windows.iter().find(|w| w.model == model && w.window == window).map(|w| w.mae)
    }
}

fn fold_data(dataset: &FidelityDataset<f64>, fold: &CvFold) -> FidelityDataset<f64> {
    let mut lf = vec![false; dataset.n_lf()];
    fold.train_lf.iter().for_each(|&i| lf[i] = true);
    let mut hf = vec![false; dataset.n_hf()];
    fold.train_hf.iter().for_each(|&i| hf[i] = true);
    dataset.filter(|i| lf[i], |i| hf[i])
}

/// Runs every model on every fold of the window × HF-station sweep.
pub fn st_block_cv(dataset: &FidelityDataset<f64>, config: &CvConfig) -> Result<CvReport> {
    if config.models.is_empty() {
        return Err(Error::EmptyInput("CV model list"));
    }
    let plan = plan_folds(dataset, config.window_len, config.time_unit)?;
    let jobs: Vec<(&CvFold, &CvModel)> =
        plan.folds.iter().flat_map(|f| config.models.iter().map(move |m| (f, m))).collect();
    let folds: Vec<FoldResult> = jobs
        .par_iter()
        .map(|&(fold, model)| {
            let train = fold_data(dataset, fold);
            let test_points: Vec<_> = fold.test_hf.iter().map(|&i| dataset.hf.points[i]).collect();
            let truth: Vec<f64> = fold.test_hf.iter().map(|&i| dataset.hf.values[i]).collect();
            let res = fit(&train, &config.init, &model.loss, &config.fit).and_then(|r| {
                let p = Predictor::with_means(&train, &r.theta_hat, r.mean_offset)?.predict_hf(&test_points)?;
                Ok((r.converged, mae(&p.mean, &truth)?, rmse(&p.mean, &truth)?))
            });
            let base = FoldResult {
                window: fold.window,
                station: fold.holdout_station.clone(),
                model: model.name.clone(),
                mae: f64::NAN,
                rmse: f64::NAN,
                n_test: truth.len(),
                converged: false,
                error: None,
            };
            match res {
                Ok((converged, a, r)) => FoldResult { mae: a, rmse: r, converged, ..base },
                Err(e) => {
                    log::warn!("fold window={} station={} model={}: {e}", fold.window, fold.holdout_station, model.name);
                    FoldResult { error: Some(e.to_string()), ..base }
                }
            }
        })
        .collect();

    let mut windows = Vec::new();
    for w in 1..=plan.n_windows {
        for m in &config.models {
            let ok: Vec<&FoldResult> =
                folds.iter().filter(|f| f.window == w && f.model == m.name && f.error.is_none()).collect();
            if ok.is_empty() {
                continue;
            }
            let n = ok.len() as f64;
            windows.push(WindowSummary {
                window: w,
                model: m.name.clone(),
                mae: ok.iter().map(|f| f.mae).sum::<f64>() / n,
                rmse: ok.iter().map(|f| f.rmse).sum::<f64>() / n,
                n_folds: ok.len(),
            });
        }
    }
    let models = config
        .models
        .iter()
        .map(|m| {
            let all: Vec<&FoldResult> = folds.iter().filter(|f| f.model == m.name).collect();
            let ok: Vec<&&FoldResult> = all.iter().filter(|f| f.error.is_none()).collect();
            let n = ok.len().max(1) as f64;
            ModelSummary {
                model: m.name.clone(),
                mean_mae: ok.iter().map(|f| f.mae).sum::<f64>() / n,
                mean_rmse: ok.iter().map(|f| f.rmse).sum::<f64>() / n,
                n_folds: ok.len(),
                n_failed: all.len() - ok.len(),
            }
        })
        .collect();
    Ok(CvReport { n_windows: plan.n_windows, hf_stations: plan.hf_stations, folds, windows, models, skipped: plan.skipped })
}

/// Column headers of the summary table.
pub const STATS_COLUMNS: [&str; 8] =
    ["Station ID", "Count", "Min", "Max", "Mean", "Std. Error", "95% CI (Lower)", "95% CI (Upper)"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub group: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `sd / √n` with the sample standard deviation; NaN for a single value.
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Per-group count, range, mean, standard error and `mean ± 1.96·SE`.
pub fn descriptive_stats(groups: &[(String, Vec<f64>)]) -> Result<Vec<DescriptiveRow>> {
    groups
        .iter()
        .map(|(name, v)| {
            if v.is_empty() {
                return Err(Error::EmptyInput("descriptive statistics group"));
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let se = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                f64::NAN
            };
            Ok(DescriptiveRow {
                group: name.clone(),
                count: v.len(),
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean,
                std_error: se,
                ci_lower: mean - 1.96 * se,
                ci_upper: mean + 1.96 * se,
            })
        })
        .collect()
}

/// Groups observation values by station id, in id order.
pub fn group_by_station(dataset: &FidelityDataset<f64>) -> Vec<(String, Vec<f64>)> {
    let mut map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for obs in [&dataset.lf, &dataset.hf] {
        for (i, &v) in obs.values.iter().enumerate() {
            map.entry(dataset.stations[obs.station[i]].id.clone()).or_default().push(v);
        }
    }
    map.into_iter().collect()
}

/// Groups observation values by fidelity with the given labels.
pub fn group_by_fidelity(dataset: &FidelityDataset<f64>, lf_label: &str, hf_label: &str) -> Vec<(String, Vec<f64>)> {
    vec![(lf_label.to_string(), dataset.lf.values.clone()), (hf_label.to_string(), dataset.hf.values.clone())]
}

pub fn write_stats_csv<W: Write>(rows: &[DescriptiveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STATS_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.count.to_string(),
            format!("{:.3}", r.min),
            format!("{:.3}", r.max),
            format!("{:.3}", r.mean),
            format!("{:.4}", r.std_error),
            format!("{:.3}", r.ci_lower),
            format!("{:.3}", r.ci_upper),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Observations, Station};
    use crate::kernels::{KernelParams, SpaceTimePoint};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mae(&[1.0, 2.0], &[3.0, 2.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[1.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0], &[-2.5]).unwrap(), 2.5);
        assert_relative_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5355, epsilon = 1e-4);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(relative_efficiency(1.3, 1.3).unwrap(), 1.0);
        assert!((relative_efficiency(2.213, 1.395).unwrap() - 2.52).abs() < 0.01);
        assert!((relative_efficiency(0.758, 1.241).unwrap() - 0.37).abs() < 0.01);
        assert!(relative_efficiency(0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-12);
        }
    }

    fn daily(n_days: usize, n_hf: usize, n_lf: usize) -> FidelityDataset<f64> {
        let mut stations = Vec::new();
        let mut lf = Observations::default();
        let mut hf = Observations::default();
        for s in 0..n_hf + n_lf {
            stations.push(Station { id: format!("st{:02}", n_hf + n_lf - s), s1: s as f64, s2: 0.0 });
            for d in 0..n_days {
                let p = SpaceTimePoint::new(s as f64, 0.0, d as f64);
                let v = (s + d) as f64 * 0.01;
                if s < n_hf {
                    hf.push(p, v, s);
                } else {
                    lf.push(p, v, s);
                }
            }
        }
        FidelityDataset { stations, lf, hf }
    }

    #[test]
    fn fold_plan_structure() {
        let d = daily(335, 4, 2);
        let plan = plan_folds(&d, 30.0, 1.0).unwrap();
        assert_eq!(plan.n_windows, 11);
        assert_eq!(plan.folds.len(), 44);
        assert_eq!(plan.hf_stations, vec!["st03", "st04", "st05", "st06"]);
        for (k, f) in plan.folds.iter().enumerate() {
            assert_eq!(f.window, k / 4 + 1);
            assert_eq!(f.holdout_station, plan.hf_stations[k % 4]);
            assert_eq!(f.test_hf.len(), 30);
            assert_eq!(f.train_hf.len(), 90);
            assert_eq!(f.train_lf.len(), 60);
        }
        // every HF row of a window is tested exactly once
        let mut seen = vec![0; d.n_hf()];
        plan.folds.iter().flat_map(|f| &f.test_hf).for_each(|&i| seen[i] += 1);
        assert!(seen.iter().enumerate().all(|(i, &c)| c == usize::from(d.hf.points[i].t < 330.0)));

        let small = daily(30, 2, 1);
        assert_eq!(plan_folds(&small, 30.0, 1.0).unwrap().folds.len(), 2);
        assert!(plan_folds(&daily(29, 2, 1), 30.0, 1.0).is_err());
        assert!(plan_folds(&daily(60, 1, 1), 30.0, 1.0).is_err());
    }

    #[test]
    fn missing_station_window_is_skipped() {
        let mut d = daily(60, 3, 1);
        d.hf = d.hf.filter_rows(|i| !(d.hf.station[i] == 0 && d.hf.points[i].t >= 30.0));
        let plan = plan_folds(&d, 30.0, 1.0).unwrap();
        assert_eq!(plan.folds.len(), 5);
        assert_eq!(plan.skipped, vec![(2, "st04".to_string())]);
    }

    #[test]
    fn perfectly_informative_lf_gives_tiny_errors() {
        // HF equals LF at co-located sites; LF observed everywhere.
        let mut stations = Vec::new();
        let mut lf = Observations::default();
        let mut hf = Observations::default();
        for s in 0..3 {
            stations.push(Station { id: format!("h{s}"), s1: s as f64, s2: 0.0 });
        }
        for s in 0..3 {
            for d in 0..10 {
                let p = SpaceTimePoint::new(s as f64, 0.0, d as f64);
                let v = (0.3 * s as f64).sin() + (0.2 * d as f64).cos();
                lf.push(p, v, s);
                hf.push(p, v, s);
            }
        }
        let d = FidelityDataset { stations, lf, hf };
        let init = ModelParams {
            rho: 1.0,
            kernel_l: KernelParams::new(1.0, 2.0, 2.0, 3.0),
            kernel_delta: KernelParams::new(1e-4, 2.0, 2.0, 3.0),
            tau_l_sq: 1e-4,
            tau_h_sq: 1e-4,
        };
        let fit = FitOptions { optimizer: crate::estimation::OptimizerSettings { max_iter: 0, ..Default::default() }, ..Default::default() };
        let cfg = CvConfig {
            window_len: 10.0,
            time_unit: 1.0,
            init,
            fit,
            models: vec![
                CvModel { name: "classic".into(), loss: Loss::Gaussian },
                CvModel { name: "robust".into(), loss: Loss::Huber(Default::default()) },
            ],
        };
        let report = st_block_cv(&d, &cfg).unwrap();
        assert_eq!(report.folds.len(), 6);
        for f in &report.folds {
            assert!(f.error.is_none());
            assert!(f.mae < 0.05, "{f:?}");
            assert!(f.rmse >= f.mae);
        }
        for w in &report.windows {
            let folds: Vec<f64> =
                report.folds.iter().filter(|f| f.window == w.window && f.model == w.model).map(|f| f.mae).collect();
            assert_relative_eq!(w.mae, folds.iter().sum::<f64>() / folds.len() as f64, epsilon = 1e-15);
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("window,station,model,mae,rmse\n"));
    }

    #[test]
    fn descriptive_examples() {
        let rows = descriptive_stats(&[("c".into(), vec![2.5; 4]), ("x".into(), vec![1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(rows[0].mean, 2.5);
        assert_eq!(rows[0].std_error, 0.0);
        assert_eq!((rows[0].ci_lower, rows[0].ci_upper), (2.5, 2.5));
        assert_eq!(rows[1].mean, 2.0);
        assert_relative_eq!(rows[1].std_error, 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(rows[1].ci_upper - rows[1].mean, 1.96 / 3f64.sqrt(), epsilon = 1e-15);
        assert!(descriptive_stats(&[("e".into(), vec![])]).is_err());
    }

    #[test]
    fn stats_table_columns() {
        let rows = descriptive_stats(&[("SDS011".into(), vec![0.082, 999.9, 9.0])]).unwrap();
        let mut buf = Vec::new();
        write_stats_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(headers, STATS_COLUMNS);
        let rec = r.records().next().unwrap().unwrap();
        assert_eq!(&rec[3], "999.900");
    }

    #[test]
    fn published_summary_ci_is_mean_pm_196_se() {
        // (mean, se, lower, upper) rows of the published per-type summary
        for (m, se, lo, hi) in [(9.326f64, 0.1887, 8.956, 9.696), (10.728, 0.1963, 10.343, 11.113)] {
            assert!((m - 1.96 * se - lo).abs() < 1.5e-3);
            assert!((m + 1.96 * se - hi).abs() < 1.5e-3);
        }
    }
}
