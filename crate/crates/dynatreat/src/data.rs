//! Observational data: loading, validation and covariate standardization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Column mapping for a CSV dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub arrival_time: Option<String>,
    #[serde(default)]
    pub instrument: Option<String>,
    /// Convert covariates to z-scores after parsing.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl Schema {
    pub fn new(outcome: &str, treatment: &str, covariates: &[&str]) -> Self {
        Schema {
            outcome: outcome.into(),
            treatment: treatment.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            arrival_time: None,
            instrument: None,
            standardize: true,
        }
    }
}

/// Per-column centering and scaling applied to covariates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Map a raw covariate vector onto the standardized scale.
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// The offline sample `{Y_i, W_i, X_i}` plus optional arrival times and instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalData {
    pub covariate_names: Vec<String>,
    /// Row-major covariates, `n * d` entries.
    pub x: Vec<f64>,
    pub d: usize,
    pub y: Vec<f64>,
    pub w: Vec<bool>,
    pub arrival: Option<Vec<f64>>,
    pub instrument: Option<Vec<bool>>,
    pub standardization: Option<Standardization>,
}

impl ObservationalData {
    /// Build and validate a dataset from row-major covariates.
    pub fn new(x: Vec<f64>, d: usize, y: Vec<f64>, w: Vec<bool>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(invalid("dataset has zero rows"));
        }
        if w.len() != n || x.len() != n * d {
            return Err(invalid(format!(
                "inconsistent lengths: y={}, w={}, x={} (d={d})",
                n,
                w.len(),
                x.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("row {i}: non-finite outcome")));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("row {}: non-finite covariate", k / d.max(1))));
        }
        Ok(ObservationalData {
            covariate_names: (0..d).map(|j| format!("x{}", j + 1)).collect(),
            x,
            d,
            y,
            w,
            arrival: None,
            instrument: None,
            standardization: None,
        })
    }

    pub fn with_arrival(mut self, times: Vec<f64>) -> Result<Self> {
        if times.len() != self.n() {
            return Err(invalid("arrival column length mismatch"));
        }
        if let Some(i) = times.iter().position(|t| !(0.0..1.0).contains(t)) {
            return Err(invalid(format!("row {i}: arrival time outside [0,1)")));
        }
        self.arrival = Some(times);
        Ok(self)
    }

    pub fn with_instrument(mut self, z: Vec<bool>) -> Result<Self> {
        if z.len() != self.n() {
            return Err(invalid("instrument column length mismatch"));
        }
        self.instrument = Some(z);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn n_treated(&self) -> usize {
        self.w.iter().filter(|&&w| w).count()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> ObservationalData {
        let mut x = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        ObservationalData {
            covariate_names: self.covariate_names.clone(),
            x,
            d: self.d,
            y: rows.iter().map(|&i| self.y[i]).collect(),
            w: rows.iter().map(|&i| self.w[i]).collect(),
            arrival: self.arrival.as_ref().map(|a| rows.iter().map(|&i| a[i]).collect()),
            instrument: self
                .instrument
                .as_ref()
                .map(|z| rows.iter().map(|&i| z[i]).collect()),
            standardization: self.standardization.clone(),
        }
    }

    /// Replace covariates by z-scores, recording the constants used.
    ///
    /// Constant columns are centered and left with unit scale.
    pub fn standardize(&mut self) -> &Standardization {
        let n = self.n() as f64;
        let mut means = vec![0.0; self.d];
        let mut sds = vec![0.0; self.d];
        for j in 0..self.d {
            let m = (0..self.n()).map(|i| self.x[i * self.d + j]).sum::<f64>() / n;
            let v = (0..self.n())
                .map(|i| (self.x[i * self.d + j] - m).powi(2))
                .sum::<f64>()
                / n;
            means[j] = m;
            sds[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        for i in 0..self.n() {
            for j in 0..self.d {
                let k = i * self.d + j;
                self.x[k] = (self.x[k] - means[j]) / sds[j];
            }
        }
        self.standardization.insert(Standardization { means, sds })
    }
}

fn parse_cell(raw: &str, row: usize, col: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(invalid(format!("row {row}: missing value in column '{col}'")));
    }
    s.parse::<f64>()
        .map_err(|_| invalid(format!("row {row}: cannot parse '{s}' in column '{col}'")))
}

fn parse_binary(raw: &str, row: usize, col: &str) -> Result<bool> {
    match parse_cell(raw, row, col)? {
        0.0 => Ok(false),
        1.0 => Ok(true),
        v => Err(invalid(format!(
            "row {row}: column '{col}' must be 0 or 1, found {v}"
        ))),
    }
}

/// Read a CSV file with a header row according to `schema`.
///
/// Row indices in error messages are zero-based data rows (header excluded).
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<ObservationalData> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| invalid(format!("column '{name}' not found in header")))
    };
    let yi = col(&schema.outcome)?;
    let wi = col(&schema.treatment)?;
    let xi: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let ti = schema.arrival_time.as_deref().map(col).transpose()?;
    let zi = schema.instrument.as_deref().map(col).transpose()?;

    let d = xi.len();
    let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    let (mut times, mut inst) = (Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(k).unwrap_or("");
        y.push(parse_cell(get(yi), row, &schema.outcome)?);
        w.push(parse_binary(get(wi), row, &schema.treatment)?);
        for (&k, name) in xi.iter().zip(&schema.covariates) {
            x.push(parse_cell(get(k), row, name)?);
        }
        if let (Some(k), Some(name)) = (ti, schema.arrival_time.as_deref()) {
            times.push(parse_cell(get(k), row, name)?);
        }
        if let (Some(k), Some(name)) = (zi, schema.instrument.as_deref()) {
            inst.push(parse_binary(get(k), row, name)?);
        }
    }
    let mut data = ObservationalData::new(x, d, y, w)?;
    data.covariate_names = schema.covariates.clone();
    if ti.is_some() {
        data = data.with_arrival(times)?;
    }
    if zi.is_some() {
        data = data.with_instrument(inst)?;
    } else {
        let treated = data.n_treated();
        if treated == 0 || treated == data.n() {
            return Err(invalid("dataset contains only one treatment arm"));
        }
    }
    if schema.standardize {
        data.standardize();
    }
    Ok(data)
}

/// Write a dataset back to CSV (covariates on their current scale).
pub fn write_dataset(path: impl AsRef<Path>, data: &ObservationalData) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["y".to_string(), "w".to_string()];
    header.extend(data.covariate_names.iter().cloned());
    if data.arrival.is_some() {
        header.push("arrival".into());
    }
    if data.instrument.is_some() {
        header.push("z".into());
    }
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y[i].to_string(), u8::from(data.w[i]).to_string()];
        rec.extend(data.row(i).iter().map(|v| v.to_string()));
        if let Some(a) = &data.arrival {
            rec.push(a[i].to_string());
        }
        if let Some(z) = &data.instrument {
            rec.push(u8::from(z[i]).to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
