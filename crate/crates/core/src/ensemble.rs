//! Finite sample ensembles. A `dim x N` matrix whose column `k` is the
//! realization at outcome `k`; every outcome carries weight `1/N`, so the
//! ensemble is the probability space and second moments are exact sums.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    samples: Matrix,
}

impl SampleEnsemble {
    pub fn new(samples: Matrix) -> Result<Self> {
        if samples.ncols() == 0 {
            return Err(Error::shape("sample ensemble", "at least one sample", "0 samples"));
        }
        ensure_finite(&samples)?;
        Ok(Self { samples })
    }

    /// Row-major construction: `rows[i][k]` is component `i` of sample `k`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::shape("sample ensemble rows", n, "ragged rows"));
        }
        Self::new(Matrix::from_fn(dim, n, |i, k| rows[i][k]))
    }

    pub fn zeros(dim: usize, n_samples: usize) -> Self {
        Self {
            samples: Matrix::zeros(dim, n_samples.max(1)),
        }
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn into_samples(self) -> Matrix {
        self.samples
    }

    pub fn check_paired(&self, other: &SampleEnsemble) -> Result<()> {
        if self.n_samples() != other.n_samples() {
            return Err(Error::SampleMismatch {
                left: self.n_samples(),
                right: other.n_samples(),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &SampleEnsemble) -> Result<SampleEnsemble> {
        self.check_paired(other)?;
        if self.dim() != other.dim() {
            return Err(Error::shape("ensemble difference", self.dim(), other.dim()));
        }
        Ok(Self {
            samples: &self.samples - &other.samples,
        })
    }

    /// Mean-centred copy and the removed mean. Never applied implicitly.
    pub fn centered(&self) -> (SampleEnsemble, Vec<f64>) {
        let n = self.n_samples() as f64;
        let mean: Vec<f64> = (0..self.dim())
            .map(|i| self.samples.row(i).iter().sum::<f64>() / n)
            .collect();
        let samples = Matrix::from_fn(self.dim(), self.n_samples(), |i, k| {
            self.samples[(i, k)] - mean[i]
        });
        (Self { samples }, mean)
    }

    /// Sub-ensemble made of the first `rows` components.
    pub fn leading_rows(&self, rows: usize) -> SampleEnsemble {
        Self {
            samples: self.samples.rows(0, rows.min(self.dim())).into_owned(),
        }
    }
}

/// Uncentered cross moment `E_xy = (1/N) X Y^T`.
///
/// Accumulated in a fixed order (sample index ascending) so that
/// `estimate_cov(x, y) == estimate_cov(y, x)^T` bit for bit.
pub fn estimate_cov(x: &SampleEnsemble, y: &SampleEnsemble) -> Result<Matrix> {
    x.check_paired(y)?;
    let (xs, ys) = (x.samples(), y.samples());
    let n = x.n_samples();
    let inv_n = 1.0 / n as f64;
    let mut out = Matrix::zeros(x.dim(), y.dim());
    for i in 0..x.dim() {
        for j in 0..y.dim() {
            let mut acc = 0.0;
            for k in 0..n {
                acc += xs[(i, k)] * ys[(j, k)];
            }
            out[(i, j)] = acc * inv_n;
        }
    }
    Ok(out)
}

/// `E_xx`, exactly symmetric.
pub fn self_cov(x: &SampleEnsemble) -> Matrix {
    let xs = x.samples();
    let n = x.n_samples();
    let inv_n = 1.0 / n as f64;
    let d = x.dim();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..n {
                acc += xs[(i, k)] * xs[(j, k)];
            }
            out[(i, j)] = acc * inv_n;
            out[(j, i)] = acc * inv_n;
        }
    }
    out
}

/// `||x||_Omega^2 = (1/N) ||X||_F^2`.
pub fn omega_norm_sq(x: &SampleEnsemble) -> f64 {
    let n = x.n_samples() as f64;
    x.samples().iter().map(|v| v * v).sum::<f64>() / n
}

/// Columnwise application `[A x](w) = A x(w)`.
pub fn apply_matrix(a: &Matrix, x: &SampleEnsemble) -> Result<SampleEnsemble> {
    if a.ncols() != x.dim() {
        return Err(Error::shape("apply_matrix", format!("{} columns", x.dim()), a.ncols()));
    }
    Ok(SampleEnsemble {
        samples: a * x.samples(),
    })
}

/// Axis convention for CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// Rows are vector components, columns are samples.
    #[default]
    ComponentsInRows,
    /// Rows are samples.
    SamplesInRows,
}

impl Orientation {
    pub fn from_transpose_flag(transpose: bool) -> Self {
        if transpose {
            Orientation::SamplesInRows
        } else {
            Orientation::ComponentsInRows
        }
    }
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn load_csv(path: &Path, orientation: Orientation) -> Result<SampleEnsemble> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
    parse_csv(&text, orientation).map_err(|e| match e {
        Error::Data { message, .. } => data_err(path, message),
        other => other,
    })
}

/// Parses CSV text. A first row that does not parse as numbers is a header.
pub fn parse_csv(text: &str, orientation: Orientation) -> Result<SampleEnsemble> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Data {
            path: String::new(),
            message: format!("row {line}: {e}"),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, usize>> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().map_err(|_| c + 1))
            .collect();
        if idx == 0 && parsed.iter().all(|p| p.is_err()) {
            continue;
        }
        let mut values = Vec::with_capacity(parsed.len());
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                Ok(_) => {
                    return Err(Error::Data {
                        path: String::new(),
                        message: format!("row {line}, column {}: non-finite value", c + 1),
                    })
                }
                Err(col) => {
                    return Err(Error::Data {
                        path: String::new(),
                        message: format!(
                            "row {line}, column {col}: not a number: {:?}",
                            record.get(col - 1).unwrap_or("")
                        ),
                    })
                }
            }
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Data {
                    path: String::new(),
                    message: format!("row {line}: expected {w} columns, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    let Some(width) = width else {
        return Err(Error::Data {
            path: String::new(),
            message: "file contains no numeric rows".into(),
        });
    };
    let height = rows.len();
    let samples = match orientation {
        Orientation::ComponentsInRows => Matrix::from_fn(height, width, |i, k| rows[i][k]),
        Orientation::SamplesInRows => Matrix::from_fn(width, height, |i, k| rows[k][i]),
    };
    SampleEnsemble::new(samples)
}

/// Shortest round-trip decimal rendering; parses back to the same bits.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn to_csv_string(x: &SampleEnsemble, orientation: Orientation) -> String {
    let m = x.samples();
    let (outer, inner) = match orientation {
        Orientation::ComponentsInRows => (m.nrows(), m.ncols()),
        Orientation::SamplesInRows => (m.ncols(), m.nrows()),
    };
    let mut out = String::new();
    for a in 0..outer {
        for b in 0..inner {
            if b > 0 {
                out.push(',');
            }
            let v = match orientation {
                Orientation::ComponentsInRows => m[(a, b)],
                Orientation::SamplesInRows => m[(b, a)],
            };
            out.push_str(&format_float(v));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(x: &SampleEnsemble, path: &Path, orientation: Orientation) -> Result<()> {
    fs::write(path, to_csv_string(x, orientation))?;
    Ok(())
}
