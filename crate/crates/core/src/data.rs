//! Per-environment datasets and their CSV form.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("x has {x_rows} rows but y has {y_len} entries")]
    RowMismatch { x_rows: usize, y_len: usize },
    #[error("x has {cols} columns but {names} feature names were given")]
    NameMismatch { cols: usize, names: usize },
    #[error("non-finite value in environment `{env}` at row {row}")]
    NonFinite { env: String, row: usize },
    #[error("environments disagree on feature names")]
    FeatureMismatch,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed csv: {0}")]
    Malformed(String),
}

/// Observed features and target sampled from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentData {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub env_id: String,
    pub feature_names: Vec<String>,
}

impl EnvironmentData {
    pub fn new(
        x: Array2<f64>,
        y: Array1<f64>,
        env_id: impl Into<String>,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let env_id = env_id.into();
        if x.nrows() != y.len() {
            return Err(DataError::RowMismatch { x_rows: x.nrows(), y_len: y.len() });
        }
        if x.ncols() != feature_names.len() {
            return Err(DataError::NameMismatch { cols: x.ncols(), names: feature_names.len() });
        }
        for (row, (xr, yv)) in x.outer_iter().zip(y.iter()).enumerate() {
            if !yv.is_finite() || xr.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { env: env_id, row });
            }
        }
        Ok(Self { x, y, env_id, feature_names })
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn with_id(mut self, env_id: impl Into<String>) -> Self {
        self.env_id = env_id.into();
        self
    }

    /// Copy of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            env_id: self.env_id.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Stacks environments row-wise in the given order.
    pub fn concat(parts: &[&EnvironmentData], env_id: impl Into<String>) -> Result<Self, DataError> {
        let Some(first) = parts.first() else {
            return Err(DataError::Malformed("nothing to concatenate".into()));
        };
        if parts.iter().any(|p| p.feature_names != first.feature_names) {
            return Err(DataError::FeatureMismatch);
        }
        let xs: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
        let ys: Vec<_> = parts.iter().map(|p| p.y.view()).collect();
        let x = ndarray::concatenate(Axis(0), &xs).expect("column counts checked");
        let y = ndarray::concatenate(Axis(0), &ys).expect("1-d concatenation");
        Ok(Self { x, y, env_id: env_id.into(), feature_names: first.feature_names.clone() })
    }

    /// Rescales every feature column to zero mean and unit (population)
    /// variance. Constant columns are only centered.
    pub fn standardized(&self) -> Self {
        let mut out = self.clone();
        let n = self.n_samples() as f64;
        for mut col in out.x.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
        }
        out
    }

    /// CSV with header `feature_names..., y`; numbers in round-trip precision.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.feature_names.clone();
        header.push("y".into());
        w.write_record(&header)?;
        for (xr, yv) in self.x.outer_iter().zip(self.y.iter()) {
            let mut rec: Vec<String> = xr.iter().map(|v| fmt_f64(*v)).collect();
            rec.push(fmt_f64(*yv));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, env_id: impl Into<String>) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.last().map(String::as_str) != Some("y") {
            return Err(DataError::Malformed("last column must be `y`".into()));
        }
        let d = header.len() - 1;
        let mut flat = Vec::new();
        let mut y = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for (j, cell) in rec.iter().enumerate() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Malformed(format!("bad number `{cell}`")))?;
                if j < d {
                    flat.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        let x = Array2::from_shape_vec((y.len(), d), flat)
            .map_err(|e| DataError::Malformed(e.to_string()))?;
        Self::new(x, Array1::from(y), env_id, header[..d].to_vec())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
