//! Staggered-adoption panel data: the dataset type, CSV ingestion and
//! export, and structural validation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Name of the auto-prepended constant covariate.
pub const INTERCEPT: &str = "(intercept)";

/// Balanced N x T panel with absorbing staggered treatment.
///
/// Adoption times are 1-based; a never-treated unit has adoption time
/// `n_periods + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    outcome: DMatrix<f64>,
    treatment: DMatrix<u8>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    has_intercept: bool,
    adoption: Vec<usize>,
    unit_labels: Vec<String>,
    time_labels: Vec<i64>,
}

impl PanelDataset {
    /// Builds a dataset from adoption times. `covariates` excludes the
    /// constant column; it is prepended when `add_intercept` is set.
    pub fn from_adoption(
        outcome: DMatrix<f64>,
        adoption: Vec<usize>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        add_intercept: bool,
    ) -> Result<Self> {
        let (n, t) = outcome.shape();
        if adoption.len() != n {
            return Err(Error::Schema(format!(
                "{} adoption times for {n} units",
                adoption.len()
            )));
        }
        if let Some((i, &a)) = adoption.iter().enumerate().find(|(_, &a)| a == 0 || a > t + 1) {
            return Err(Error::Domain(format!(
                "unit {} has adoption time {a} outside 1..={}",
                i + 1,
                t + 1
            )));
        }
        let treatment = DMatrix::from_fn(n, t, |i, s| u8::from(s + 1 >= adoption[i]));
        Self::assemble(outcome, treatment, adoption, covariates, covariate_names, add_intercept)
    }

    /// Builds a dataset from a 0/1 treatment matrix, checking that every
    /// path is absorbing.
    pub fn from_treatment(
        outcome: DMatrix<f64>,
        treatment: DMatrix<u8>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        add_intercept: bool,
    ) -> Result<Self> {
        if outcome.shape() != treatment.shape() {
            return Err(Error::Schema("outcome and treatment shapes differ".into()));
        }
        let adoption = adoption_times(&treatment)?;
        Self::assemble(outcome, treatment, adoption, covariates, covariate_names, add_intercept)
    }

    fn assemble(
        outcome: DMatrix<f64>,
        treatment: DMatrix<u8>,
        adoption: Vec<usize>,
        covariates: DMatrix<f64>,
        mut covariate_names: Vec<String>,
        add_intercept: bool,
    ) -> Result<Self> {
        let (n, t) = outcome.shape();
        if n == 0 || t == 0 {
            return Err(Error::Schema("empty panel".into()));
        }
        if covariates.nrows() != n {
            return Err(Error::Schema(format!(
                "covariate matrix has {} rows for {n} units",
                covariates.nrows()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Schema("covariate names do not match columns".into()));
        }
        if outcome.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite outcome or covariate value".into()));
        }
        if !adoption.iter().any(|&a| a == t + 1) {
            return Err(Error::Domain("panel has no never-treated unit".into()));
        }
        if let Some(i) = adoption.iter().position(|&a| a <= 1) {
            return Err(Error::Domain(format!(
                "unit {} is treated in the first period; a pre-treatment period is required",
                i + 1
            )));
        }
        let covariates = if add_intercept {
            covariate_names.insert(0, INTERCEPT.to_string());
            let mut z = DMatrix::<f64>::from_element(n, covariates.ncols() + 1, 1.0);
            z.columns_mut(1, covariates.ncols()).copy_from(&covariates);
            z
        } else {
            covariates
        };
        Ok(PanelDataset {
            outcome,
            treatment,
            covariates,
            covariate_names,
            has_intercept: add_intercept,
            adoption,
            unit_labels: (1..=n).map(|i| i.to_string()).collect(),
            time_labels: (1..=t as i64).collect(),
        })
    }

    /// Replaces the unit and time labels used on export.
    pub fn with_labels(mut self, units: Vec<String>, times: Vec<i64>) -> Result<Self> {
        if units.len() != self.n_units() || times.len() != self.n_periods() {
            return Err(Error::Schema("label lengths do not match panel shape".into()));
        }
        self.unit_labels = units;
        self.time_labels = times;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.outcome.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcome.ncols()
    }

    /// Number of covariates including the constant column, if any.
    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn outcome(&self) -> &DMatrix<f64> {
        &self.outcome
    }

    pub fn treatment(&self) -> &DMatrix<u8> {
        &self.treatment
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    /// 1-based adoption times, `n_periods + 1` for never treated.
    pub fn adoption(&self) -> &[usize] {
        &self.adoption
    }

    pub fn ever_treated(&self, unit: usize) -> bool {
        self.adoption[unit] <= self.n_periods()
    }

    pub fn ever_treated_vec(&self) -> Vec<bool> {
        (0..self.n_units()).map(|i| self.ever_treated(i)).collect()
    }

    /// Number of periods before adoption (all periods for never treated).
    pub fn pre_periods(&self, unit: usize) -> usize {
        self.adoption[unit] - 1
    }

    pub fn n_treated_cells(&self) -> usize {
        self.treatment.iter().map(|&d| d as usize).sum()
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    /// Copy with a different outcome matrix, everything else unchanged.
    pub fn with_outcome(&self, outcome: DMatrix<f64>) -> Result<Self> {
        if outcome.shape() != self.outcome.shape() {
            return Err(Error::Schema("replacement outcome has the wrong shape".into()));
        }
        let mut d = self.clone();
        d.outcome = outcome;
        Ok(d)
    }

    /// Writes the panel in long format: `unit,time,y,d,<covariates>`.
    /// The constant column is not written.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let skip = usize::from(self.has_intercept);
        let mut header = vec!["unit".to_string(), "time".into(), "y".into(), "d".into()];
        header.extend(self.covariate_names[skip..].iter().cloned());
        out.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n_units() {
            for t in 0..self.n_periods() {
                row.clear();
                row.push(self.unit_labels[i].clone());
                row.push(self.time_labels[t].to_string());
                row.push(self.outcome[(i, t)].to_string());
                row.push(self.treatment[(i, t)].to_string());
                for j in skip..self.n_covariates() {
                    row.push(self.covariates[(i, j)].to_string());
                }
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// 1-based adoption times from a treatment matrix; errors on any path
/// that returns to control after treatment.
pub fn adoption_times(treatment: &DMatrix<u8>) -> Result<Vec<usize>> {
    let (n, t) = treatment.shape();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut adopt = t + 1;
        for s in 0..t {
            match treatment[(i, s)] {
                0 => {
                    if adopt <= t {
                        return Err(Error::NonAbsorbing {
                            unit: i + 1,
                            period: s + 1,
                        });
                    }
                }
                1 => {
                    if adopt > t {
                        adopt = s + 1;
                    }
                }
                v => return Err(Error::Domain(format!("treatment value {v} is not binary"))),
            }
        }
        out.push(adopt);
    }
    Ok(out)
}

/// Column names for CSV ingestion.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: String,
    /// `None` takes every remaining column as a covariate.
    pub covariates: Option<Vec<String>>,
    pub add_intercept: bool,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "y".into(),
            treatment: "d".into(),
            covariates: None,
            add_intercept: true,
        }
    }
}

pub fn load_panel_csv(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<PanelDataset> {
    let f = std::fs::File::open(path)?;
    read_panel_csv(std::io::BufReader::new(f), columns)
}

/// Reads a long-format panel. Units and periods are densified in sorted
/// order (numerically when every unit id parses as an integer).
pub fn read_panel_csv<R: Read>(reader: R, columns: &ColumnMap) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let unit_col = find(&columns.unit)?;
    let time_col = find(&columns.time)?;
    let y_col = find(&columns.outcome)?;
    let d_col = find(&columns.treatment)?;
    let cov_names: Vec<String> = match &columns.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(k, _)| ![unit_col, time_col, y_col, d_col].contains(k))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let cov_cols = cov_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    struct Row {
        unit: String,
        time: i64,
        y: f64,
        d: u8,
        z: Vec<f64>,
    }
    let parse_f = |s: &str, what: &str, line: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Domain(format!("line {line}: `{s}` is not a number in column {what}")))
    };
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let time = rec[time_col]
            .parse::<i64>()
            .map_err(|_| Error::Domain(format!("line {line}: time `{}` is not an integer", &rec[time_col])))?;
        let d = match parse_f(&rec[d_col], &columns.treatment, line)? {
            0.0 => 0,
            1.0 => 1,
            v => return Err(Error::Domain(format!("line {line}: treatment value {v} is not binary"))),
        };
        let z = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| parse_f(&rec[c], name, line))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            unit: rec[unit_col].to_string(),
            time,
            y: parse_f(&rec[y_col], &columns.outcome, line)?,
            d,
            z,
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let mut units: Vec<String> = rows.iter().map(|r| r.unit.clone()).collect();
    units.sort();
    units.dedup();
    if units.iter().all(|u| u.parse::<i64>().is_ok()) {
        units.sort_by_key(|u| u.parse::<i64>().unwrap());
    }
    let mut times: Vec<i64> = rows.iter().map(|r| r.time).collect();
    times.sort_unstable();
    times.dedup();
    let unit_idx: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let time_idx: HashMap<i64, usize> = times.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let (n, t, p) = (units.len(), times.len(), cov_names.len());
    if rows.len() != n * t {
        return Err(Error::Balance(format!(
            "{} rows for {n} units x {t} periods",
            rows.len()
        )));
    }
    let mut y = DMatrix::<f64>::zeros(n, t);
    let mut d = DMatrix::<u8>::zeros(n, t);
    let mut z = DMatrix::<f64>::zeros(n, p);
    let mut seen = vec![false; n * t];
    let mut z_seen = vec![false; n];
    for r in &rows {
        let i = unit_idx[r.unit.as_str()];
        let s = time_idx[&r.time];
        if std::mem::replace(&mut seen[i * t + s], true) {
            return Err(Error::Balance(format!(
                "duplicate row for unit `{}` at time {}",
                r.unit, r.time
            )));
        }
        y[(i, s)] = r.y;
        d[(i, s)] = r.d;
        if z_seen[i] {
            for (j, &v) in r.z.iter().enumerate() {
                if v != z[(i, j)] {
                    return Err(Error::Domain(format!(
                        "covariate `{}` varies over time for unit `{}`",
                        cov_names[j], r.unit
                    )));
                }
            }
        } else {
            for (j, &v) in r.z.iter().enumerate() {
                z[(i, j)] = v;
            }
            z_seen[i] = true;
        }
    }
    PanelDataset::from_treatment(y, d, z, cov_names, columns.add_intercept)?.with_labels(units, times)
}

/// Structural summary of a validated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Earliest adoption period (1-based).
    pub first_adoption: usize,
    pub n_treated_units: usize,
    pub n_control_units: usize,
    /// Treated-cell counts keyed by event time `t - A_i`, `r >= 0`.
    pub horizon_counts: BTreeMap<i64, usize>,
}

pub fn validate_staggered(data: &PanelDataset) -> Result<ValidationReport> {
    let adoption = adoption_times(data.treatment())?;
    debug_assert_eq!(adoption, data.adoption());
    let t = data.n_periods();
    let mut horizon_counts = BTreeMap::new();
    for &a in adoption.iter().filter(|&&a| a <= t) {
        for s in a..=t {
            *horizon_counts.entry((s - a) as i64).or_insert(0) += 1;
        }
    }
    let n_treated_units = adoption.iter().filter(|&&a| a <= t).count();
    Ok(ValidationReport {
        first_adoption: adoption.iter().copied().min().unwrap_or(t + 1),
        n_treated_units,
        n_control_units: data.n_units() - n_treated_units,
        horizon_counts,
    })
}

/// Estimand selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimandTarget {
    Overall,
    /// Event time `r = t - A_i`; negative values are pre-treatment gaps.
    Dynamic(i64),
}

impl EstimandTarget {
    /// Whether any cell contributes to this estimand.
    pub fn is_supported(&self, data: &PanelDataset) -> bool {
        let t = data.n_periods() as i64;
        match *self {
            EstimandTarget::Overall => data.n_treated_cells() > 0,
            EstimandTarget::Dynamic(r) => data
                .adoption()
                .iter()
                .map(|&a| a as i64)
                .any(|a| a <= t && (1..=t).contains(&(a + r))),
        }
    }
}
