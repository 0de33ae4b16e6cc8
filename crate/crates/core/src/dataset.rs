//! Paired low-/high-fidelity observation sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpaceTimePoint;
use crate::scalar::Scalar;

/// A monitoring site. Both fidelities index into one shared station table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station<T> {
    pub id: String,
    pub s1: T,
    pub s2: T,
}

/// Observations of one fidelity. Rows are ordered station-major with time
/// varying fastest whenever the data come from a complete panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations<T> {
    pub points: Vec<SpaceTimePoint<T>>,
    pub values: Vec<T>,
    /// Index into [`FidelityDataset::stations`] for every row.
    pub station: Vec<usize>,
}

impl<T> Default for Observations<T> {
    fn default() -> Self {
        Self { points: Vec::new(), values: Vec::new(), station: Vec::new() }
    }
}

impl<T: Scalar> Observations<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, point: SpaceTimePoint<T>, value: T, station: usize) {
        self.points.push(point);
        self.values.push(value);
        self.station.push(station);
    }

    /// Rows for which `keep(row)` holds, in original order.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut out = Self::default();
        for i in 0..self.len() {
            if keep(i) {
                out.push(self.points[i], self.values[i], self.station[i]);
            }
        }
        out
    }

    pub fn mean(&self) -> Option<T> {
        if self.is_empty() {
            return None;
        }
        let sum = self.values.iter().fold(T::zero(), |a, &v| a + v);
        Some(sum / T::of_usize(self.len()))
    }

    /// Sample standard deviation (n - 1 denominator).
    pub fn sd(&self) -> Option<T> {
        let n = self.len();
        if n < 2 {
            return None;
        }
        let m = self.mean()?;
        let ss = self.values.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
        Some((ss / T::of_usize(n - 1)).sqrt())
    }

    /// Distinct station indices in first-appearance order.
    pub fn station_set(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for &s in &self.station {
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        seen
    }

    fn validate(&self, n_stations: usize, which: &'static str) -> Result<()> {
        if self.points.len() != self.values.len() || self.station.len() != self.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{which}: {} points, {} values, {} station tags",
                self.points.len(),
                self.values.len(),
                self.station.len()
            )));
        }
        if self.points.iter().any(|p| !p.is_finite()) || self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(which));
        }
        if self.station.iter().any(|&s| s >= n_stations) {
            return Err(Error::DimensionMismatch(format!("{which}: station index out of range")));
        }
        Ok(())
    }
}

/// Low-fidelity and high-fidelity observations with their station table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityDataset<T> {
    pub stations: Vec<Station<T>>,
    pub lf: Observations<T>,
    pub hf: Observations<T>,
}

impl<T: Scalar> FidelityDataset<T> {
    pub fn validate(&self) -> Result<()> {
        self.lf.validate(self.stations.len(), "low-fidelity observations")?;
        self.hf.validate(self.stations.len(), "high-fidelity observations")
    }

    /// Errors unless both fidelities have at least one row.
    pub fn require_both(&self) -> Result<()> {
        if self.lf.is_empty() {
            return Err(Error::EmptyInput("low-fidelity observations"));
        }
        if self.hf.is_empty() {
            return Err(Error::EmptyInput("high-fidelity observations"));
        }
        Ok(())
    }

    pub fn n_lf(&self) -> usize {
        self.lf.len()
    }

    pub fn n_hf(&self) -> usize {
        self.hf.len()
    }

    /// Stacked response `[y_L; y_H]`.
    pub fn stacked_values(&self) -> Vec<T> {
        self.lf.values.iter().chain(&self.hf.values).copied().collect()
    }

    pub fn with_lf_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.lf.len());
        let mut out = self.clone();
        out.lf.values = values;
        out
    }

    pub fn with_hf_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.hf.len());
        let mut out = self.clone();
        out.hf.values = values;
        out
    }

    /// Keeps LF rows with `keep_lf(row)` and HF rows with `keep_hf(row)`.
    pub fn filter(&self, keep_lf: impl FnMut(usize) -> bool, keep_hf: impl FnMut(usize) -> bool) -> Self {
        Self { stations: self.stations.clone(), lf: self.lf.filter_rows(keep_lf), hf: self.hf.filter_rows(keep_hf) }
    }

    /// Subtracts the empirical mean of each fidelity. Returns the centered data and
    /// the `(mean_lf, mean_hf)` offsets needed to map predictions back.
    pub fn centered(&self) -> (Self, (T, T)) {
        let ml = self.lf.mean().unwrap_or_else(T::zero);
        let mh = self.hf.mean().unwrap_or_else(T::zero);
        let mut out = self.clone();
        out.lf.values.iter_mut().for_each(|v| *v -= ml);
        out.hf.values.iter_mut().for_each(|v| *v -= mh);
        (out, (ml, mh))
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }
}
