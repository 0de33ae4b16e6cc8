//! Station CSV ingestion, nearest-LF site selection, run configuration and
//! run manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{FidelityDataset, Observations, Station};
use crate::error::{Error, Result};
use crate::estimation::{FitOptions, HuberConfig};
use crate::kernels::SpaceTimePoint;
use crate::prediction::GridSpec;
use crate::simulation::{DgpConfig, McConfig};
use crate::theory::BoundConfig;

/// Value flagged as an instrument sentinel in the data-quality summary.
pub const SENTINEL_VALUE: f64 = 999.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Lf,
    Hf,
}

impl FromStr for Fidelity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lf" | "low" | "l" => Ok(Fidelity::Lf),
            "hf" | "high" | "h" => Ok(Fidelity::Hf),
            other => Err(Error::Parse(format!("unknown fidelity '{other}'"))),
        }
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fidelity::Lf => "LF",
            Fidelity::Hf => "HF",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub lon: f64,
    pub lat: f64,
    /// Days since the ingestion origin.
    pub day: f64,
    pub value: f64,
    pub fidelity: Fidelity,
}

/// Header names of the input columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub station_id: String,
    pub lon: String,
    pub lat: String,
    pub timestamp: String,
    pub value: String,
    pub fidelity: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            station_id: "station_id".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            timestamp: "timestamp".into(),
            value: "value".into(),
            fidelity: "fidelity".into(),
        }
    }
}

/// `lon_min,lat_min,lon_max,lat_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }
}

impl FromStr for BBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad bbox component '{p}'"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("bbox needs 4 comma-separated numbers, got {}", v.len())));
        }
        let b = BBox { lon_min: v[0], lat_min: v[1], lon_max: v[2], lat_max: v[3] };
        if !(b.lon_min < b.lon_max && b.lat_min < b.lat_max) || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("bbox '{s}' is empty or non-finite")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct IngestOptions {
    pub columns: ColumnMap,
    pub bbox: Option<BBox>,
    /// Average rows per station, fidelity and calendar day.
    pub aggregate_daily: bool,
    /// Drop values above this bound.
    pub prefilter_max: Option<f64>,
    /// Day zero; defaults to the earliest date in the file.
    pub origin: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IngestReport {
    pub n_rows: usize,
    pub n_valid: usize,
    pub n_skipped: usize,
    /// `(line, reason)` for skipped rows; line 1 is the header.
    pub skipped: Vec<(usize, String)>,
    pub n_outside_bbox: usize,
    pub n_prefiltered: usize,
    /// Valid rows equal to [`SENTINEL_VALUE`].
    pub n_sentinel: usize,
    pub origin: Option<NaiveDate>,
    pub n_lf_stations: usize,
    pub n_hf_stations: usize,
}

enum Stamp {
    Days(f64),
    Date(NaiveDateTime),
}

fn parse_stamp(s: &str) -> Option<Stamp> {
    let s = s.trim();
    if let Ok(d) = s.parse::<f64>() {
        return d.is_finite().then_some(Stamp::Days(d));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(Stamp::Date(d.and_hms_opt(0, 0, 0)?));
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(Stamp::Date(dt.naive_utc()));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(Stamp::Date)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse(format!("missing required column '{name}'")))
}

/// Parses station rows, skipping and reporting malformed ones.
pub fn read_station_records<R: Read>(reader: R, opts: &IngestOptions) -> Result<(Vec<StationRecord>, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c = &opts.columns;
    let idx = [
        column(&headers, &c.station_id)?,
        column(&headers, &c.lon)?,
        column(&headers, &c.lat)?,
        column(&headers, &c.timestamp)?,
        column(&headers, &c.value)?,
        column(&headers, &c.fidelity)?,
    ];
    let mut report = IngestReport::default();
    let mut parsed: Vec<(String, f64, f64, Stamp, f64, Fidelity)> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        report.n_rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.skipped.push((line, e.to_string()));
                continue;
            }
        };
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let num = |k: usize| field(k).parse::<f64>().ok().filter(|v| v.is_finite());
        let id = field(0).to_string();
        let reason = if id.is_empty() {
            Some("empty station id")
        } else if num(1).is_none() || num(2).is_none() {
            Some("invalid coordinates")
        } else if num(4).is_none() {
            Some("non-finite value")
        } else {
            None
        };
        if let Some(r) = reason {
            report.skipped.push((line, r.into()));
            continue;
        }
        let Some(stamp) = parse_stamp(field(3)) else {
            report.skipped.push((line, format!("unparseable timestamp '{}'", field(3))));
            continue;
        };
        let fid = match field(5).parse::<Fidelity>() {
            Ok(f) => f,
            Err(e) => {
                report.skipped.push((line, e.to_string()));
                continue;
            }
        };
        let (lon, lat, value) = (num(1).unwrap(), num(2).unwrap(), num(4).unwrap());
        if let Some(b) = &opts.bbox {
            if !b.contains(lon, lat) {
                report.n_outside_bbox += 1;
                continue;
            }
        }
        if let Some(max) = opts.prefilter_max {
            if value > max {
                report.n_prefiltered += 1;
                continue;
            }
        }
        parsed.push((id, lon, lat, stamp, value, fid));
    }
    report.n_skipped = report.skipped.len();

    let earliest = parsed
        .iter()
        .filter_map(|p| match &p.3 {
            Stamp::Date(d) => Some(d.date()),
            Stamp::Days(_) => None,
        })
        .min();
    let origin = opts.origin.or(earliest);
    report.origin = origin;
    let mut records: Vec<StationRecord> = parsed
        .into_iter()
        .map(|(station_id, lon, lat, stamp, value, fidelity)| {
            let day = match stamp {
                Stamp::Days(d) => d,
                Stamp::Date(dt) => {
                    let o = origin.expect("origin exists when a date was parsed").and_hms_opt(0, 0, 0).unwrap();
                    (dt - o).num_seconds() as f64 / 86_400.0
                }
            };
            StationRecord { station_id, lon, lat, day, value, fidelity }
        })
        .collect();
    if opts.aggregate_daily {
        records = aggregate_daily(&records);
    }
    report.n_valid = records.len();
    report.n_sentinel = records.iter().filter(|r| r.value == SENTINEL_VALUE).count();
    let count = |f: Fidelity| records.iter().filter(|r| r.fidelity == f).map(|r| &r.station_id).collect::<BTreeSet<_>>().len();
    report.n_lf_stations = count(Fidelity::Lf);
    report.n_hf_stations = count(Fidelity::Hf);
    Ok((records, report))
}

/// Mean value per station, fidelity and whole day.
pub fn aggregate_daily(records: &[StationRecord]) -> Vec<StationRecord> {
    let mut acc: BTreeMap<(String, Fidelity, i64), (f64, f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((r.station_id.clone(), r.fidelity, r.day.floor() as i64)).or_insert((r.lon, r.lat, 0.0, 0));
        e.2 += r.value;
        e.3 += 1;
    }
    acc.into_iter()
        .map(|((station_id, fidelity, day), (lon, lat, sum, n))| StationRecord {
            station_id,
            lon,
            lat,
            day: day as f64,
            value: sum / n as f64,
            fidelity,
        })
        .collect()
}

/// Assembles a dataset with stations sorted by id and rows ordered by station then time.
pub fn records_to_dataset(records: &[StationRecord]) -> Result<FidelityDataset<f64>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("station records (no valid rows)"));
    }
    let mut coords: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in records {
        coords.entry(r.station_id.as_str()).or_insert((r.lon, r.lat));
    }
    let index: BTreeMap<&str, usize> = coords.keys().enumerate().map(|(i, k)| (*k, i)).collect();
    let stations =
        coords.iter().map(|(id, &(s1, s2))| Station { id: id.to_string(), s1, s2 }).collect::<Vec<_>>();
    let mut sorted: Vec<&StationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        index[a.station_id.as_str()].cmp(&index[b.station_id.as_str()]).then(a.day.total_cmp(&b.day))
    });
    let mut lf = Observations::default();
    let mut hf = Observations::default();
    for r in sorted {
        let s = index[r.station_id.as_str()];
        let st = &stations[s];
        let obs = if r.fidelity == Fidelity::Lf { &mut lf } else { &mut hf };
        obs.push(SpaceTimePoint::new(st.s1, st.s2, r.day), r.value, s);
    }
    let ds = FidelityDataset { stations, lf, hf };
    ds.validate()?;
    Ok(ds)
}

pub fn read_station_csv(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<(FidelityDataset<f64>, IngestReport)> {
    let (records, report) = read_station_records(File::open(path)?, opts)?;
    Ok((records_to_dataset(&records)?, report))
}

/// Writes one row per observation with the time as a numeric day index.
/// Reading the output back with default options reproduces the values exactly.
pub fn write_station_csv<W: Write>(dataset: &FidelityDataset<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["station_id", "lon", "lat", "timestamp", "value", "fidelity"])?;
    for (obs, fid) in [(&dataset.lf, Fidelity::Lf), (&dataset.hf, Fidelity::Hf)] {
        for i in 0..obs.len() {
            let st = &dataset.stations[obs.station[i]];
            w.write_record([
                st.id.clone(),
                st.s1.to_string(),
                st.s2.to_string(),
                obs.points[i].t.to_string(),
                obs.values[i].to_string(),
                fid.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A named site location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

/// Union of the `k` nearest LF sites (Euclidean in lon/lat) of every HF site,
/// sorted by id. Distance ties are broken by id.
pub fn nearest_lf_selection(hf_sites: &[Site], lf_sites: &[Site], k: usize) -> Result<Vec<String>> {
    if lf_sites.is_empty() {
        return Err(Error::EmptyInput("LF sites"));
    }
    if hf_sites.is_empty() {
        return Err(Error::EmptyInput("HF sites"));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let mut chosen = BTreeSet::new();
    for h in hf_sites {
        let mut d: Vec<(f64, &str)> =
            lf_sites.iter().map(|l| ((l.lon - h.lon).powi(2) + (l.lat - h.lat).powi(2), l.id.as_str())).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        d.dedup_by(|a, b| a.1 == b.1);
        chosen.extend(d.into_iter().take(k).map(|(_, id)| id.to_string()));
    }
    Ok(chosen.into_iter().collect())
}

/// Sites carrying observations of the given fidelity.
pub fn fidelity_sites(dataset: &FidelityDataset<f64>, fidelity: Fidelity) -> Vec<Site> {
    let obs = if fidelity == Fidelity::Lf { &dataset.lf } else { &dataset.hf };
    obs.station_set()
        .into_iter()
        .map(|s| {
            let st = &dataset.stations[s];
            Site { id: st.id.clone(), lon: st.s1, lat: st.s2 }
        })
        .collect()
}

/// Keeps only LF rows from the `k` nearest LF sites of each HF site.
pub fn restrict_to_nearest_lf(dataset: &FidelityDataset<f64>, k: usize) -> Result<FidelityDataset<f64>> {
    let keep: BTreeSet<String> = nearest_lf_selection(
        &fidelity_sites(dataset, Fidelity::Hf),
        &fidelity_sites(dataset, Fidelity::Lf),
        k,
    )?
    .into_iter()
    .collect();
    let lf_keep: Vec<bool> = dataset.lf.station.iter().map(|&s| keep.contains(&dataset.stations[s].id)).collect();
    Ok(dataset.filter(|i| lf_keep[i], |_| true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSettings {
    pub window_len: f64,
    pub time_unit: f64,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self { window_len: 30.0, time_unit: 1.0 }
    }
}

/// Settings of a CLI run, read from TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dgp: DgpConfig,
    pub huber: HuberConfig<f64>,
    pub fit: FitOptions,
    pub mc: McConfig,
    pub cv: CvSettings,
    pub ingest: IngestOptions,
    pub grid: Option<GridSpec<f64>>,
    pub theory: BoundConfig,
    /// Nearest LF sites kept per HF site; all when unset.
    pub k_nearest: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.mc.dgp.validate()?;
        self.huber.validate()?;
        self.theory.validate()?;
        if !(self.cv.window_len > 0.0) || !(self.cv.time_unit > 0.0) {
            return Err(Error::InvalidParameter("cv window_len and time_unit must be > 0".into()));
        }
        if self.k_nearest == Some(0) {
            return Err(Error::InvalidParameter("k_nearest must be >= 1".into()));
        }
        if let Some(g) = &self.grid {
            if g.n_lon == 0 || g.n_lat == 0 || !(g.lon_min <= g.lon_max) || !(g.lat_min <= g.lat_max) {
                return Err(Error::InvalidParameter("grid must have positive size and ordered bounds".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(sha256_hex(json.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproducibility record written next to every CLI output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub package: String,
    pub version: String,
    pub platform: String,
    /// Output file names with their SHA-256 digests.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            args,
            seed: config.seed,
            config_hash: config.hash()?,
            config: config.clone(),
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            outputs: BTreeMap::new(),
        })
    }

    /// Records the digest of a file already written under `dir`.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.outputs.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CSV3: &str = "station_id,lon,lat,timestamp,value,fidelity\n\
                        a,10.0,53.5,2023-01-01,12.5,HF\n\
                        b,10.1,53.6,2023-01-02,20.0,LF\n\
                        b,10.1,53.6,2023-01-01,18.0,LF\n";

    fn read(s: &str, opts: &IngestOptions) -> (Vec<StationRecord>, IngestReport) {
        read_station_records(s.as_bytes(), opts).unwrap()
    }

    #[test]
    fn reads_well_formed_rows() {
        let (recs, rep) = read(CSV3, &IngestOptions::default());
        assert_eq!(recs.len(), 3);
        assert_eq!(rep.n_skipped, 0);
        assert_eq!(rep.origin, NaiveDate::from_ymd_opt(2023, 1, 1));
        let ds = records_to_dataset(&recs).unwrap();
        assert_eq!((ds.n_lf(), ds.n_hf()), (2, 1));
        assert_eq!(ds.lf.points.iter().map(|p| p.t).collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(ds.stations[1].id, "b");
    }

    #[test]
    fn skips_nan_and_garbage() {
        let s = format!("{CSV3}c,1,2,2023-01-01,NaN,LF\nd,x,2,2023-01-01,1,LF\ne,1,2,notadate,1,LF\nf,1,2,2023-01-01,1,medium\n");
        let (recs, rep) = read(&s, &IngestOptions::default());
        assert_eq!(recs.len(), 3);
        assert_eq!(rep.n_skipped, 4);
        assert_eq!(rep.skipped[0], (5, "non-finite value".to_string()));
    }

    #[test]
    fn sentinel_kept_and_flagged() {
        let s = format!("{CSV3}b,10.1,53.6,2023-01-03,999.900,LF\n");
        let (recs, rep) = read(&s, &IngestOptions::default());
        assert_eq!(recs.len(), 4);
        assert_eq!(rep.n_sentinel, 1);
        let (recs, rep) = read(&s, &IngestOptions { prefilter_max: Some(500.0), ..Default::default() });
        assert_eq!((recs.len(), rep.n_prefiltered, rep.n_sentinel), (3, 1, 0));
    }

    #[test]
    fn missing_column_is_an_error() {
        let s = "id,lon,lat,timestamp,value,fidelity\na,1,2,0,1,HF\n";
        assert!(read_station_records(s.as_bytes(), &IngestOptions::default()).is_err());
        let opts = IngestOptions {
            columns: ColumnMap { station_id: "id".into(), ..ColumnMap::default() },
            ..Default::default()
        };
        assert_eq!(read(s, &opts).0.len(), 1);
    }

    #[test]
    fn no_valid_rows_is_an_error() {
        let (recs, _) = read("station_id,lon,lat,timestamp,value,fidelity\na,1,2,0,NaN,HF\n", &IngestOptions::default());
        assert!(records_to_dataset(&recs).is_err());
    }

    #[test]
    fn bbox_and_daily_aggregation() {
        let s = "station_id,lon,lat,timestamp,value,fidelity\n\
                 a,10,53,2023-01-01T06:00:00,10,LF\n\
                 a,10,53,2023-01-01T18:00:00,20,LF\n\
                 a,10,53,2023-01-02 12:00:00,5,LF\n\
                 z,30,53,2023-01-01,7,LF\n";
        let opts = IngestOptions {
            bbox: Some("9,52,11,54".parse().unwrap()),
            aggregate_daily: true,
            ..Default::default()
        };
        let (recs, rep) = read(s, &opts);
        assert_eq!(rep.n_outside_bbox, 1);
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].day, recs[0].value), (0.0, 15.0));
        assert_eq!((recs[1].day, recs[1].value), (1.0, 5.0));
        let (raw, _) = read(s, &IngestOptions::default());
        assert_eq!(raw[0].day, 0.25);
    }

    #[test]
    fn bbox_parsing() {
        assert!("1,2,3".parse::<BBox>().is_err());
        assert!("3,2,1,4".parse::<BBox>().is_err());
        assert!("a,2,3,4".parse::<BBox>().is_err());
    }

    #[test]
    fn round_trip_is_lossless() {
        let sim = crate::simulation::simulate_mf(&DgpConfig { grid_side: 2, n_times: 3, ..DgpConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_station_csv(&sim.dataset, &mut buf).unwrap();
        let (recs, rep) = read_station_records(buf.as_slice(), &IngestOptions::default()).unwrap();
        assert_eq!(rep.n_skipped, 0);
        let back = records_to_dataset(&recs).unwrap();
        assert_eq!(back.lf.values, sim.dataset.lf.values);
        assert_eq!(back.hf.values, sim.dataset.hf.values);
        assert_eq!(back.lf.points, sim.dataset.lf.points);
    }

    fn site(id: &str, lon: f64, lat: f64) -> Site {
        Site { id: id.into(), lon, lat }
    }

    #[test]
    fn nearest_selection_examples() {
        let hf = [site("h", 0.0, 0.0)];
        let lf = [site("a", 3.0, 0.0), site("b", 1.0, 0.0), site("c", 0.0, 2.0)];
        assert_eq!(nearest_lf_selection(&hf, &lf, 2).unwrap(), vec!["b", "c"]);
        let hf2 = [site("h1", 0.0, 0.0), site("h2", 0.5, 0.0)];
        let sel = nearest_lf_selection(&hf2, &lf, 2).unwrap();
        assert!(sel.len() < 4);
        assert!(nearest_lf_selection(&hf, &[], 2).is_err());
        assert!(nearest_lf_selection(&hf, &lf, 0).is_err());
        // equidistant: id decides
        let tie = [site("y", 1.0, 0.0), site("x", -1.0, 0.0)];
        assert_eq!(nearest_lf_selection(&hf, &tie, 1).unwrap(), vec!["x"]);
    }

    #[test]
    fn restricting_lf_rows() {
        let sim = crate::simulation::simulate_mf(&DgpConfig { grid_side: 3, n_times: 2, ..DgpConfig::default() }).unwrap();
        let mut ds = sim.dataset;
        let keep_hf: Vec<bool> = ds.hf.station.iter().map(|&s| s == 4).collect();
        ds = ds.filter(|_| true, |i| keep_hf[i]);
        let r = restrict_to_nearest_lf(&ds, 5).unwrap();
        assert_eq!(r.lf.station_set().len(), 5);
        assert!(r.lf.station_set().contains(&4));
    }

    #[test]
    fn config_round_trip_and_hash() {
        let cfg = RunConfig { seed: 7, ..RunConfig::default() };
        let s = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_ne!(RunConfig::default().hash().unwrap(), cfg.hash().unwrap());
        assert!(RunConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(RunConfig::from_toml_str("[cv]\nwindow_len = -1.0").is_err());
        let partial = RunConfig::from_toml_str("seed = 3\n[huber]\nc_multiplier = 2.0\n").unwrap();
        assert_eq!((partial.seed, partial.huber.c_multiplier), (3, 2.0));
    }

    #[test]
    fn manifest_records_outputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.csv"), "a\n").unwrap();
        let mut m = Manifest::new("simulate", vec!["--seed".into(), "1".into()], &RunConfig::default()).unwrap();
        m.record_output(dir.path(), "x.csv").unwrap();
        let p = m.write(dir.path()).unwrap();
        let back: Manifest = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.outputs["x.csv"].len(), 64);
    }

    proptest! {
        #[test]
        fn selection_is_order_invariant(pts in proptest::collection::vec((-5i32..5, -5i32..5), 1..12), k in 1usize..6, rot in 0usize..12) {
            let lf: Vec<Site> = pts.iter().enumerate().map(|(i, (x, y))| site(&format!("l{i:02}"), *x as f64, *y as f64)).collect();
            let hf = [site("h0", 0.0, 0.0), site("h1", 2.0, 1.0)];
            let mut shuffled = lf.clone();
            shuffled.rotate_left(rot % lf.len());
            shuffled.reverse();
            let a = nearest_lf_selection(&hf, &lf, k).unwrap();
            prop_assert_eq!(&a, &nearest_lf_selection(&hf, &shuffled, k).unwrap());
            prop_assert!(a.len() <= lf.len().min(k * hf.len()));
        }
    }
}
