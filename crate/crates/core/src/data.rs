//! Logistic-regression datasets: delimited-text loading and synthetic generation.

use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::sigmoid;
use crate::trimat::{Matrix, Vector};

pub const INTERCEPT: &str = "intercept";

/// Design matrix, binary labels and a record of how they were prepared.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vector,
    pub feature_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Writes features and the label column. An `intercept` column is omitted so
    /// that reloading with `schema.intercept` set reproduces the data.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P, schema: &CsvSchema) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(schema.delimiter)
            .from_path(path.as_ref())?;
        let keep: Vec<usize> = (0..self.d())
            .filter(|&j| !(schema.intercept && self.feature_names[j] == INTERCEPT))
            .collect();
        let mut header: Vec<&str> = keep
            .iter()
            .map(|&j| self.feature_names[j].as_str())
            .collect();
        header.push(&schema.label_column);
        w.write_record(&header)?;
        let negative = if schema.positive_label == "0" {
            "1"
        } else {
            "0"
        };
        for i in 0..self.n() {
            let mut row: Vec<String> = keep.iter().map(|&j| self.x[(i, j)].to_string()).collect();
            row.push(if self.y[i] == 1.0 {
                schema.positive_label.clone()
            } else {
                negative.to_string()
            });
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How to turn a delimited file into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// Label cells equal to this (after trimming) map to 1, all others to 0.
    pub positive_label: String,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub intercept: bool,
    #[serde(default = "default_delimiter", with = "delimiter_char")]
    pub delimiter: u8,
}

fn default_delimiter() -> u8 {
    b','
}

mod delimiter_char {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &u8, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&(*d as char).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<u8, D::Error> {
        let s = String::deserialize(de)?;
        let s = if s == "\\t" { "\t" } else { s.as_str() };
        match s.as_bytes() {
            [b] => Ok(*b),
            _ => Err(D::Error::custom(format!(
                "delimiter must be one byte, got `{s}`"
            ))),
        }
    }
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>, positive_label: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            positive_label: positive_label.into(),
            standardize: false,
            intercept: false,
            delimiter: b',',
        }
    }
}

pub fn load_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let schema_err = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_reader(File::open(path)?);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| *h == schema.label_column)
        .ok_or_else(|| schema_err(format!("missing label column `{}`", schema.label_column)))?;
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|&j| j != label_idx).collect();
    if feature_idx.is_empty() {
        return Err(schema_err("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row; the header is row 0
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row,
                column: String::new(),
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        for &j in &feature_idx {
            let cell = record[j].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Data {
                path: path.to_path_buf(),
                row,
                column: headers[j].clone(),
                message: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    row,
                    column: headers[j].clone(),
                    message: format!("non-finite cell `{cell}`"),
                });
            }
            values.push(v);
        }
        labels.push(if record[label_idx].trim() == schema.positive_label {
            1.0
        } else {
            0.0
        });
    }
    let n = labels.len();
    if n == 0 {
        return Err(schema_err("no data rows".into()));
    }
    let mut x = Matrix::from_row_slice(n, feature_idx.len(), &values);
    let mut names: Vec<String> = feature_idx.iter().map(|&j| headers[j].clone()).collect();

    if schema.standardize {
        for (j, name) in names.iter().enumerate() {
            standardize_column(&mut x, j).map_err(|message| Error::Data {
                path: path.to_path_buf(),
                row: 0,
                column: name.clone(),
                message,
            })?;
        }
    }
    if schema.intercept {
        x = x.insert_column(0, 1.0);
        names.insert(0, INTERCEPT.to_string());
    }

    let provenance =
        format!(
        "source={}; label_column={}; positive_label={}; standardize={}{}; intercept={}; n={}; d={}",
        path.display(),
        schema.label_column,
        schema.positive_label,
        schema.standardize,
        if schema.standardize { " (centered, sample sd with n-1 divisor)" } else { "" },
        schema.intercept,
        n,
        x.ncols(),
    );
    Ok(Dataset {
        x,
        y: Vector::from_vec(labels),
        feature_names: names,
        provenance,
    })
}

/// Centers column `j` and scales it to unit sample standard deviation (n - 1 divisor).
pub fn standardize_column(x: &mut Matrix, j: usize) -> std::result::Result<(), String> {
    let n = x.nrows();
    if n < 2 {
        return Err("standardization needs at least two rows".into());
    }
    let mean = x.column(j).sum() / n as f64;
    let ss: f64 = x.column(j).iter().map(|v| (v - mean).powi(2)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err("constant column cannot be standardized (zero variance)".into());
    }
    for v in x.column_mut(j).iter_mut() {
        *v = (*v - mean) / sd;
    }
    Ok(())
}

/// `d` iid `N(0, scale^2)` coefficients, for use as `theta_true`.
///
/// Drawn from a different stream than [`synth_logistic`] uses, so the same
/// seed can be passed to both.
pub fn random_coefficients(d: usize, scale: f64, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Vector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `n` rows with iid standard-normal features and `y ~ Bernoulli(logistic(x^T theta_true))`.
///
/// With `intercept`, column 0 is all ones and `theta_true[0]` is its coefficient.
pub fn synth_logistic(n: usize, theta_true: &Vector, intercept: bool, seed: u64) -> Dataset {
    let d = theta_true.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, d);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = if intercept && j == 0 {
                1.0
            } else {
                rng.sample(StandardNormal)
            };
        }
        let p = sigmoid(x.row(i).transpose().dot(theta_true));
        y[i] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
    let feature_names = (0..d)
        .map(|j| {
            if intercept && j == 0 {
                INTERCEPT.to_string()
            } else {
                format!("x{j}")
            }
        })
        .collect();
    Dataset {
        x,
        y,
        feature_names,
        provenance: format!(
            "synthetic logistic: n={n}; d={d}; intercept={intercept}; seed={seed}; theta_true={:?}",
            theta_true.as_slice()
        ),
    }
}
