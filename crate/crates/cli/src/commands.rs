use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cokrige::covariance::assemble_joint;
use cokrige::estimation::{heuristic_init, Loss};
use cokrige::evaluation::{descriptive_stats, group_by_fidelity, group_by_station, st_block_cv, write_stats_csv, CvConfig, CvModel};
use cokrige::io::{read_station_csv, restrict_to_nearest_lf, write_station_csv, Manifest, RunConfig};
use cokrige::prediction::{krige_grid_with, write_cell_summary_csv, write_grid_csv, GridSpec, Predictor};
use cokrige::simulation::{run_mc_study, simulate_mf, ContaminationSpec, EstimatorKind, StationChoice};
use cokrige::theory::{huber_influence_bound, influence_curve, pseudo_true_rho, score_rho, WhiteningRegime};
use cokrige::{Dataset, Error, FitResult, Params};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::{Cli, Command, ContaminationKind, DataArgs, LossArgs, LossKind, StatsBy};

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidParameter(_) => "invalid_parameter",
        Error::NonFinite(_) => "non_finite",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::EmptyInput(_) => "empty_input",
        Error::NotPositiveDefinite { .. } => "not_positive_definite",
        Error::Degenerate(_) => "degenerate",
        Error::Optimization(_) => "optimization",
        Error::Parse(_) => "parse",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        #[allow(unreachable_patterns)]
        _ => "library",
    }
}

struct Run<'a> {
    out: &'a Path,
    manifest: Manifest,
}

impl Run<'_> {
    fn write(&mut self, name: &str, f: impl FnOnce(BufWriter<File>) -> cokrige::Result<()>) -> Result<()> {
        let path = self.out.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        f(BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.record_output(self.out, name)?;
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        self.write(name, |w| serde_json::to_writer_pretty(w, value).map_err(|e| Error::Parse(e.to_string())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn apply_data_flags(cfg: &mut RunConfig, d: &DataArgs) -> Result<()> {
    if let Some(b) = &d.bbox {
        cfg.ingest.bbox = Some(b.parse()?);
    }
    if let Some(k) = d.k_nearest {
        cfg.k_nearest = Some(k);
    }
    cfg.ingest.aggregate_daily |= d.aggregate_daily;
    if d.prefilter.is_some() {
        cfg.ingest.prefilter_max = d.prefilter;
    }
    Ok(())
}

fn apply_loss_flags(cfg: &mut RunConfig, whitening: Option<&str>, c_mult: Option<f64>) -> Result<()> {
    if let Some(w) = whitening {
        cfg.huber.whitening = w.parse()?;
    }
    if let Some(c) = c_mult {
        cfg.huber.c_multiplier = c;
    }
    Ok(())
}

fn loss_of(cfg: &RunConfig, l: &LossArgs) -> Loss<f64> {
    match l.loss {
        LossKind::Gaussian => Loss::Gaussian,
        LossKind::Huber => Loss::Huber(cfg.huber),
    }
}

fn parse_grid(s: &str) -> Result<GridSpec<f64>> {
    let p: Vec<&str> = s.split(',').map(str::trim).collect();
    if p.len() != 6 {
        bail!(Error::Parse(format!("grid needs lon_min,lat_min,lon_max,lat_max,n_lon,n_lat; got '{s}'")));
    }
    let f = |i: usize| p[i].parse::<f64>().map_err(|_| Error::Parse(format!("bad grid bound '{}'", p[i])));
    let n = |i: usize| p[i].parse::<usize>().map_err(|_| Error::Parse(format!("bad grid size '{}'", p[i])));
    Ok(GridSpec { lon_min: f(0)?, lat_min: f(1)?, lon_max: f(2)?, lat_max: f(3)?, n_lon: n(4)?, n_lat: n(5)? })
}

/// Parses `m=2,5,10` / `eta=0.1,0.3` tokens into magnitudes and frequencies.
fn parse_mc_grid(tokens: &[String], cfg: &mut RunConfig) -> Result<()> {
    for tok in tokens.iter().flat_map(|t| t.split_whitespace()) {
        let (key, vals) = tok.split_once('=').ok_or_else(|| Error::Parse(format!("expected key=values, got '{tok}'")))?;
        let v = vals
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{x}' in '{tok}'"))))
            .collect::<Result<Vec<f64>, Error>>()?;
        match key {
            "m" | "magnitude" | "magnitudes" => cfg.mc.magnitudes = v,
            "eta" | "frequency" | "frequencies" => cfg.mc.frequencies = v,
            other => bail!(Error::Parse(format!("unknown grid key '{other}'"))),
        }
    }
    Ok(())
}

fn load_data(cfg: &RunConfig, d: &DataArgs, run: &mut Run) -> Result<Dataset> {
    let (mut ds, report) =
        read_station_csv(&d.data, &cfg.ingest).with_context(|| format!("ingesting {}", d.data.display()))?;
    if let Some(k) = cfg.k_nearest {
        ds = restrict_to_nearest_lf(&ds, k)?;
    }
    run.write_json("ingest_report.json", &report)?;
    Ok(ds)
}

fn init_for(ds: &Dataset, path: Option<&Path>) -> Result<Params> {
    match path {
        Some(p) => read_json(p),
        None => Ok(heuristic_init(ds)?),
    }
}

pub fn run(cli: &Cli, args: Vec<String>) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.dgp.seed = s;
        cfg.mc.base_seed = s;
        cfg.theory.seed = s;
    }
    let out = cli.out.clone();
    match &cli.command {
        Command::Fit { data, loss, .. } | Command::Cv { data, loss, .. } => {
            apply_data_flags(&mut cfg, data)?;
            apply_loss_flags(&mut cfg, loss.whitening.as_deref(), loss.c_mult)?;
        }
        Command::Contaminate { data, .. } | Command::Predict { data, .. } | Command::Stats { data, .. } => {
            apply_data_flags(&mut cfg, data)?
        }
        Command::Mc { grid, runs, loss } => {
            parse_mc_grid(grid, &mut cfg)?;
            if let Some(r) = runs {
                cfg.mc.n_runs = *r;
            }
            apply_loss_flags(&mut cfg, loss.whitening.as_deref(), loss.c_mult)?;
            cfg.mc.huber = cfg.huber;
        }
        Command::Theory { whitening, c_mult, regime, .. } => {
            apply_loss_flags(&mut cfg, whitening.as_deref(), *c_mult)?;
            cfg.theory.huber = cfg.huber;
            cfg.theory.regime = regime.parse()?;
        }
        Command::Simulate => {}
    }
    if let Command::Predict { grid: Some(g), .. } = &cli.command {
        cfg.grid = Some(parse_grid(g)?);
    }
    if let Command::Cv { window_len, time_unit, .. } = &cli.command {
        if let Some(w) = window_len {
            cfg.cv.window_len = *w;
        }
        if let Some(t) = time_unit {
            cfg.cv.time_unit = *t;
        }
    }
    cfg.validate()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let name = format!("{:?}", cli.command).split([' ', '{']).next().unwrap_or("run").to_lowercase();
    let mut run = Run { out: &out, manifest: Manifest::new(&name, args, &cfg)? };
    let summary = dispatch(cli, &cfg, &mut run)?;
    run.manifest.write(&out)?;
    let body = json!({
        "status": "ok",
        "command": name,
        "out": out.display().to_string(),
        "outputs": run.manifest.outputs.keys().collect::<Vec<_>>(),
        "summary": summary,
    });
    Ok(body.to_string())
}

fn dispatch(cli: &Cli, cfg: &RunConfig, run: &mut Run) -> Result<Value> {
    match &cli.command {
        Command::Simulate => {
            let sim = simulate_mf(&cfg.dgp)?;
            run.write("dataset.csv", |w| write_station_csv(&sim.dataset, w))?;
            run.write("latent.csv", |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["fidelity", "row", "station_id", "t", "latent", "noise"])?;
                for (obs, lat, noise, tag) in [
                    (&sim.dataset.lf, &sim.latent_l, &sim.noise_l, "LF"),
                    (&sim.dataset.hf, &sim.latent_delta, &sim.noise_delta, "HF"),
                ] {
                    for i in 0..obs.len() {
                        c.write_record([
                            tag.to_string(),
                            i.to_string(),
                            sim.dataset.stations[obs.station[i]].id.clone(),
                            obs.points[i].t.to_string(),
                            lat[i].to_string(),
                            noise[i].to_string(),
                        ])?;
                    }
                }
                c.flush()?;
                Ok(())
            })?;
            let truth = cfg.dgp.true_params()?;
            run.write_json("truth.json", &truth)?;
            Ok(json!({ "n_lf": sim.dataset.n_lf(), "n_hf": sim.dataset.n_hf() }))
        }
        Command::Contaminate { data, kind, magnitude, frequency, changepoint, stations, row } => {
            let ds = load_data(cfg, data, run)?;
            let spec = match kind {
                ContaminationKind::Outlier => ContaminationSpec::Outlier {
                    magnitude: *magnitude,
                    frequency: *frequency,
                    mechanism: cfg.mc.mechanism,
                    seed: cfg.seed,
                },
                ContaminationKind::LevelShift => ContaminationSpec::LevelShift {
                    magnitude: *magnitude,
                    changepoint: *changepoint,
                    stations: StationChoice::Random(*stations),
                    seed: cfg.seed,
                },
                ContaminationKind::Single => ContaminationSpec::SingleOutlier { magnitude: *magnitude, row: *row },
            };
            let c = spec.apply(&ds)?;
            run.write("dataset.csv", |w| write_station_csv(&c.dataset, w))?;
            run.write("mask.csv", |w| {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(["lf_row", "contaminated"])?;
                for (i, m) in c.mask.iter().enumerate() {
                    out.write_record([i.to_string(), (*m as u8).to_string()])?;
                }
                out.flush()?;
                Ok(())
            })?;
            run.write_json("spec.json", &spec)?;
            Ok(json!({ "n_contaminated": c.n_contaminated() }))
        }
        Command::Fit { data, loss, init, no_center } => {
            let ds = load_data(cfg, data, run)?;
            let init = init_for(&ds, init.as_deref())?;
            let mut opts = cfg.fit;
            opts.center = !no_center;
            let res = cokrige::fit(&ds, &init, &loss_of(cfg, loss), &opts)?;
            run.write_json("fit.json", &res)?;
            Ok(json!({
                "rho": res.theta_hat.rho,
                "objective": res.objective,
                "converged": res.converged,
                "iterations": res.n_iter,
                "delta": res.delta_used,
            }))
        }
        Command::Predict { data, fit, times, .. } => {
            let ds = load_data(cfg, data, run)?;
            let res: FitResult<f64> = read_json(fit)?;
            let predictor = Predictor::with_means(&ds, &res.theta_hat, res.mean_offset)?;
            match &cfg.grid {
                Some(spec) => {
                    let times = if times.is_empty() { observed_times(&ds) } else { times.clone() };
                    let g = krige_grid_with(&predictor, spec, &times)?;
                    run.write("grid.csv", |w| write_grid_csv(&g, w))?;
                    run.write("cells.csv", |w| write_cell_summary_csv(&g, w))?;
                    Ok(json!({ "cells": g.cells.len(), "times": times.len() }))
                }
                None => {
                    let p = predictor.predict_hf(&ds.hf.points)?;
                    let err: Vec<f64> = p.mean.iter().zip(&ds.hf.values).map(|(m, y)| m - y).collect();
                    let truth = &ds.hf.values;
                    let mae = cokrige::evaluation::mae(&p.mean, truth)?;
                    let rmse = cokrige::evaluation::rmse(&p.mean, truth)?;
                    run.write("predictions.csv", |w| {
                        let mut c = csv::Writer::from_writer(w);
                        c.write_record(["station_id", "lon", "lat", "t", "observed", "mean", "sd"])?;
                        for i in 0..ds.n_hf() {
                            let st = &ds.stations[ds.hf.station[i]];
                            c.write_record([
                                st.id.clone(),
                                st.s1.to_string(),
                                st.s2.to_string(),
                                ds.hf.points[i].t.to_string(),
                                ds.hf.values[i].to_string(),
                                p.mean[i].to_string(),
                                p.variance[i].sqrt().to_string(),
                            ])?;
                        }
                        c.flush()?;
                        Ok(())
                    })?;
                    Ok(json!({ "n": err.len(), "mae": mae, "rmse": rmse }))
                }
            }
        }
        Command::Cv { data, init, .. } => {
            let ds = load_data(cfg, data, run)?;
            let mut fit = cfg.fit;
            fit.center = true;
            let cv = CvConfig {
                window_len: cfg.cv.window_len,
                time_unit: cfg.cv.time_unit,
                init: init_for(&ds, init.as_deref())?,
                fit,
                models: vec![
                    CvModel { name: "gaussian".into(), loss: Loss::Gaussian },
                    CvModel { name: "huber".into(), loss: Loss::Huber(cfg.huber) },
                ],
            };
            let report = st_block_cv(&ds, &cv)?;
            run.write("cv.csv", |w| report.write_csv(w))?;
            let summary = json!({
                "n_windows": report.n_windows,
                "hf_stations": report.hf_stations,
                "n_folds": report.folds.len() / cv.models.len(),
                "models": report.models,
                "windows": report.windows,
                "skipped": report.skipped,
            });
            run.write_json("cv_summary.json", &summary)?;
            Ok(json!({ "models": report.models }))
        }
        Command::Mc { .. } => {
            let report = run_mc_study(&cfg.mc)?;
            run.write("ledger.csv", |w| report.write_ledger_csv(w))?;
            run.write("summary.csv", |w| report.write_summary_csv(w))?;
            let cells: Vec<Value> = report
                .scenarios
                .iter()
                .map(|s| json!({ "m": s.magnitude, "eta": s.frequency, "eff_rel": s.eff_rel }))
                .collect();
            Ok(json!({ "cells": cells }))
        }
        Command::Theory { data, params, magnitudes, row, magnitude, frequency, .. } => {
            let ds = match data {
                Some(p) => read_station_csv(p, &cfg.ingest)?.0,
                None => simulate_mf(&cfg.dgp)?.dataset,
            };
            let theta: Params = match params {
                Some(p) => read_json(p)?,
                None => cfg.dgp.true_params()?,
            };
            let blocks = assemble_joint(&ds, &theta)?;
            let c_l = blocks.sigma_ll();
            let s = ds.lf.sd().ok_or_else(|| anyhow!("LF standard deviation undefined"))?;
            let n_l = c_l.nrows();
            let sigma_u = DMatrix::identity(n_l, n_l) * (frequency * magnitude * magnitude * s * s);
            let (rho_star, kappa) = pseudo_true_rho(&c_l, &sigma_u, &blocks.b, &blocks.omega, theta.rho)?;
            run.write("attenuation.csv", |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["rho", "magnitude", "frequency", "kappa", "rho_star"])?;
                c.write_record([theta.rho, *magnitude, *frequency, kappa, rho_star].map(|v| v.to_string()))?;
                c.flush()?;
                Ok(())
            })?;
            let bound = huber_influence_bound(&ds, &theta, &cfg.theory)?;
            run.write("bound.csv", |w| bound.write_csv(w))?;
            let template = ContaminationSpec::SingleOutlier { magnitude: 1.0, row: *row };
            let mut max_one_step = 0.0;
            for kind in [EstimatorKind::Gaussian, EstimatorKind::Huber] {
                let curve = influence_curve(&ds, &theta, &template, magnitudes, kind, &cfg.theory)?;
                if kind == EstimatorKind::Huber {
                    max_one_step = curve.max_one_step();
                }
                run.write(&format!("curve_{}.csv", kind.label()), |w| curve.write_csv(w))?;
            }
            Ok(json!({
                "score_rho": score_rho(&ds, &theta)?,
                "kappa": kappa,
                "rho_star": rho_star,
                "c_delta": bound.c_delta,
                "lemma_bound": bound.lemma_bound,
                "regime": WhiteningRegime::label(&bound.regime),
                "max_one_step_huber": max_one_step,
            }))
        }
        Command::Stats { data, by } => {
            let ds = load_data(cfg, data, run)?;
            let groups = match by {
                StatsBy::Station => group_by_station(&ds),
                StatsBy::Fidelity => group_by_fidelity(&ds, "LF", "HF"),
            };
            let rows = descriptive_stats(&groups)?;
            run.write("stats.csv", |w| write_stats_csv(&rows, w))?;
            Ok(json!({ "groups": rows.len() }))
        }
    }
}

fn observed_times(ds: &Dataset) -> Vec<f64> {
    let mut t: Vec<f64> = ds.lf.points.iter().chain(&ds.hf.points).map(|p| p.t).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}
