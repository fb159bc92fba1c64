use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Dataset, Vector};

/// Real-valued regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionData {
    pub x: DMatrix<f64>,
    pub y: Vector,
}

impl RegressionData {
    pub fn new(x: DMatrix<f64>, y: Vector) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                left: "inputs".into(),
                left_dim: x.nrows(),
                right: "targets".into(),
                right_dim: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }
}

impl Dataset for RegressionData {
    fn len(&self) -> usize {
        self.x.nrows()
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
        }
    }
}

/// Labelled inputs. `weight_index[i]` names the per-example weight that row
/// `i` reads; it survives row selection so mini-batches keep their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationData {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub weight_index: Vec<usize>,
}

impl ClassificationData {
    pub fn new(x: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        Self::with_weight_index(x, labels, classes, (0..n).collect())
    }

    pub fn with_weight_index(
        x: DMatrix<f64>,
        labels: Vec<usize>,
        classes: usize,
        weight_index: Vec<usize>,
    ) -> Result<Self> {
        if x.nrows() != labels.len() || weight_index.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                left: "inputs".into(),
                left_dim: x.nrows(),
                right: "labels".into(),
                right_dim: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::BadParams(format!("need at least two classes, got {classes}")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::BadParams(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            x,
            labels,
            classes,
            weight_index,
        })
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }

    /// Number of distinct weights referenced (`max index + 1`).
    pub fn weight_count(&self) -> usize {
        self.weight_index.iter().max().map_or(0, |m| m + 1)
    }
}

impl Dataset for ClassificationData {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            weight_index: rows.iter().map(|&r| self.weight_index[r]).collect(),
        }
    }
}

fn header(p: usize, target: &str) -> Vec<String> {
    (0..p)
        .map(|j| format!("x{j}"))
        .chain(std::iter::once(target.to_string()))
        .collect()
}

fn write_rows<F>(path: &Path, x: &DMatrix<f64>, target: &str, mut last: F) -> Result<()>
where
    F: FnMut(usize) -> String,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(x.ncols(), target))?;
    for i in 0..x.nrows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:e}")).collect();
        rec.push(last(i));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    crate::experiment::output::write_atomic(path, &bytes)
}

/// One CSV per split: feature columns `x0..`, then the label.
pub fn write_classification_csv(path: &Path, data: &ClassificationData) -> Result<()> {
    write_rows(path, &data.x, "label", |i| data.labels[i].to_string())
}

pub fn write_regression_csv(path: &Path, data: &RegressionData) -> Result<()> {
    write_rows(path, &data.x, "target", |i| format!("{:e}", data.y[i]))
}

/// `index,corrupted` per training example.
pub fn write_mask_csv(path: &Path, mask: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "corrupted"])?;
    for (i, m) in mask.iter().enumerate() {
        w.write_record([i.to_string(), u8::from(*m).to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    crate::experiment::output::write_atomic(path, &bytes)
}

/// Reads a file written by [`write_classification_csv`].
pub fn read_classification_csv(path: &Path, classes: usize) -> Result<ClassificationData> {
    let mut r = csv::Reader::from_path(path)?;
    let p = r.headers()?.len().saturating_sub(1);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for j in 0..p {
            values.push(parse_field(&rec[j])?);
        }
        labels.push(
            rec[p]
                .parse::<usize>()
                .map_err(|e| Error::Io(format!("bad label `{}`: {e}", &rec[p])))?,
        );
    }
    let n = labels.len();
    ClassificationData::new(DMatrix::from_row_slice(n, p, &values), labels, classes)
}

fn parse_field(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::Io(format!("bad number `{s}`: {e}")))
}
