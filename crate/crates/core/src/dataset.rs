//! In-memory labeled feature matrices.

use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("feature matrix of {values} values is not a multiple of dim {dim}")]
    Ragged { values: usize, dim: usize },
    #[error("{rows} feature rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("feature dimensionality must be at least 1")]
    ZeroDim,
    #[error("non-finite feature at row {0}")]
    NonFinite(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major features with one label per row. Labels index the
/// in-distribution label set for training data; for out-of-distribution
/// sets they identify the held-out component and are informational only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    range: Option<(f64, f64)>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self, DatasetError> {
        if dim == 0 {
            return Err(DatasetError::ZeroDim);
        }
        if !features.len().is_multiple_of(dim) {
            return Err(DatasetError::Ragged {
                values: features.len(),
                dim,
            });
        }
        let rows = features.len() / dim;
        if rows != labels.len() {
            return Err(DatasetError::LabelCount {
                rows,
                labels: labels.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite(i / dim));
        }
        Ok(Dataset {
            dim,
            features,
            labels,
            range: None,
        })
    }

    /// Declares the valid input box `[lo, hi]` used for clipping perturbed
    /// inputs.
    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some((lo, hi));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        self.range
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks(self.dim)
    }

    /// Writes `label,x0,..,x{p-1}`; values use the shortest representation
    /// that reads back to the same bits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "label,{}", header.join(","))?;
        for (row, y) in self.rows().zip(&self.labels) {
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{y},{}", vals.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            message: "missing header".into(),
        })??;
        let dim = header.split(',').count().saturating_sub(1);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| DatasetError::Parse { line: i + 2, message };
            let mut fields = line.split(',');
            let y = fields.next().unwrap_or("");
            labels.push(y.trim().parse().map_err(|_| bad(format!("bad label '{y}'")))?);
            let before = features.len();
            for f in fields {
                features.push(f.trim().parse::<f64>().map_err(|_| bad(format!("bad value '{f}'")))?);
            }
            if features.len() - before != dim {
                return Err(bad(format!("expected {dim} values")));
            }
        }
        Dataset::new(dim, features, labels)
    }

    /// Subset in the given row order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            range: self.range,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(Dataset::new(0, vec![], vec![]).is_err());
        assert!(Dataset::new(2, vec![1.0; 3], vec![0]).is_err());
        assert!(Dataset::new(2, vec![1.0; 4], vec![0]).is_err());
        assert!(Dataset::new(1, vec![f64::NAN], vec![0]).is_err());
        let d = Dataset::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![0, 1]).unwrap();
        assert_eq!(d.row(1), &[3.0, 4.0]);
        let s = d.select(&[1, 1, 0]);
        assert_eq!(s.labels(), &[1, 1, 0]);
        assert_eq!(s.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = Dataset::new(2, vec![0.1, -1.0 / 3.0, 1e-300, 2.5e10], vec![3, 0]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"label,x0,x1\n3,0.1,"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), d);
        assert!(Dataset::read_csv("label,x0\n1,2,3\n".as_bytes()).is_err());
    }
}
