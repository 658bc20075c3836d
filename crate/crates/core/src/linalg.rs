//! Dense kernels: thin SVD, truncated SVD, Moore-Penrose pseudo-inverse and
//! the symmetric PSD eigendecomposition used to form `(E^{1/2})^†`.
//!
//! Factorizations are delegated to nalgebra. Everything returned from here is
//! put into a canonical form: singular values and eigenvalues sorted
//! non-increasing (stable by index under ties) and every singular/eigen
//! vector scaled so that its largest-magnitude entry is positive.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative asymmetry accepted by the PSD routines.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues down to `-PSD_FLOOR * lambda_max` are clamped to zero.
pub const PSD_FLOOR: f64 = 1e-10;

const MAX_ITERATIONS: usize = 100_000;
/// Convergence threshold for the symmetric eigensolver.
const SOLVER_EPS: f64 = 5.0 * f64::EPSILON;

pub fn ensure_finite(a: &Matrix) -> Result<()> {
    for c in 0..a.ncols() {
        for r in 0..a.nrows() {
            if !a[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Default relative cutoff for numerical rank: `max(rows, cols) * eps`.
pub fn default_tolerance(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON
}

pub fn frobenius_sq(a: &Matrix) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Sign that makes the first largest-magnitude entry of `col` positive.
fn canonical_sign<'a>(col: impl Iterator<Item = &'a f64>) -> f64 {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for v in col {
        if v.abs() > best {
            best = v.abs();
            sign = if *v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

/// Indices that sort `values` non-increasing; ties keep index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Thin singular value decomposition `A = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x k` with orthonormal columns, `k = min(m, n)`.
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `n x k` with orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.u.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(k).scale_mut(*s);
        }
        scaled * self.v.transpose()
    }

    /// Number of singular values above `tol * sigma_1`.
    pub fn rank(&self, tol: f64) -> usize {
        let Some(&top) = self.singular_values.first() else {
            return 0;
        };
        if top <= 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|s| **s > tol * top).count()
    }

    /// `sum_{i <= r} s_i u_i v_i^T`.
    pub fn truncate(&self, r: usize) -> Matrix {
        let (m, n) = (self.u.nrows(), self.v.nrows());
        let mut out = Matrix::zeros(m, n);
        for k in 0..r.min(self.singular_values.len()) {
            let s = self.singular_values[k];
            if s == 0.0 {
                continue;
            }
            out += (self.u.column(k) * s) * self.v.column(k).transpose();
        }
        out
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    ensure_finite(a)?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd {
            u: Matrix::zeros(m, 0),
            singular_values: Vec::new(),
            v: Matrix::zeros(n, 0),
        });
    }
    let src = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let raw = src
        .thin_svd()
        .map_err(|_| Error::NoConvergence("singular value decomposition"))?;
    let (u_raw, v_raw, s_raw) = (raw.U(), raw.V(), raw.S().column_vector());
    let values: Vec<f64> = (0..k).map(|i| s_raw[i].abs()).collect();
    let order = descending_order(&values);

    let mut u = Matrix::zeros(m, k);
    let mut v = Matrix::zeros(n, k);
    let mut singular_values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let flip = if s_raw[src] < 0.0 { -1.0 } else { 1.0 };
        let ucol: Vec<f64> = (0..m).map(|i| u_raw[(i, src)]).collect();
        let sign = canonical_sign(ucol.iter());
        for i in 0..m {
            u[(i, dst)] = ucol[i] * sign;
        }
        for i in 0..n {
            v[(i, dst)] = v_raw[(i, src)] * sign * flip;
        }
        singular_values.push(values[src]);
    }
    Ok(Svd {
        u,
        singular_values,
        v,
    })
}

/// Numerical rank with cutoff `tol * sigma_1`.
pub fn numerical_rank(a: &Matrix, tol: f64) -> Result<usize> {
    Ok(svd(a)?.rank(tol))
}

/// Best rank-`r` Frobenius approximation `[A]_r`. Returns `a` unchanged when
/// `r` reaches the numerical rank.
pub fn truncated_svd(a: &Matrix, r: usize) -> Result<Matrix> {
    let dec = svd(a)?;
    let rank = dec.rank(default_tolerance(a.nrows(), a.ncols()));
    if r >= rank {
        return Ok(a.clone());
    }
    Ok(dec.truncate(r))
}

/// Moore-Penrose pseudo-inverse. Singular values `<= tol * sigma_1` are
/// treated as zero; `None` selects [`default_tolerance`].
pub fn pinv(a: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    let (m, n) = a.shape();
    let tol = tol.unwrap_or_else(|| default_tolerance(m, n));
    let dec = svd(a)?;
    Ok(pinv_from_svd(&dec, tol))
}

pub(crate) fn pinv_from_svd(dec: &Svd, tol: f64) -> Matrix {
    let rank = dec.rank(tol);
    let mut out = Matrix::zeros(dec.v.nrows(), dec.u.nrows());
    for k in 0..rank {
        out += (dec.v.column(k) / dec.singular_values[k]) * dec.u.column(k).transpose();
    }
    out
}

/// Eigendecomposition of a symmetric PSD matrix.
#[derive(Debug, Clone)]
pub struct PsdEigen {
    /// Non-increasing, clamped at zero.
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector of `values[i]`.
    pub vectors: Matrix,
}

impl PsdEigen {
    /// Eigenvalues above `default_tolerance * lambda_max` count as nonzero.
    pub fn rank(&self) -> usize {
        let n = self.values.len();
        let Some(&top) = self.values.first() else {
            return 0;
        };
        if top <= 0.0 {
            return 0;
        }
        let cut = default_tolerance(n, n) * top;
        self.values.iter().filter(|l| **l > cut).count()
    }

    /// `V diag(f(lambda_i)) V^T` over the nonzero part of the spectrum.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.vectors.nrows();
        let mut out = Matrix::zeros(n, n);
        for k in 0..self.rank() {
            let col = self.vectors.column(k);
            out += (col * f(self.values[k])) * col.transpose();
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.vectors.nrows();
        let mut out = Matrix::zeros(n, n);
        for (k, l) in self.values.iter().enumerate() {
            let col = self.vectors.column(k);
            out += (col * *l) * col.transpose();
        }
        out
    }
}

pub fn check_symmetric(e: &Matrix) -> Result<()> {
    if !e.is_square() {
        return Err(Error::shape("symmetric matrix", "square", format!("{}x{}", e.nrows(), e.ncols())));
    }
    ensure_finite(e)?;
    let scale = max_abs(e);
    let asymmetry = max_abs(&(e - e.transpose()));
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry, scale });
    }
    Ok(())
}

pub fn psd_eig(e: &Matrix) -> Result<PsdEigen> {
    check_symmetric(e)?;
    let n = e.nrows();
    if n == 0 {
        return Ok(PsdEigen {
            values: Vec::new(),
            vectors: Matrix::zeros(0, 0),
        });
    }
    let sym = (e + e.transpose()) * 0.5;
    let raw = SymmetricEigen::try_new(sym, SOLVER_EPS, MAX_ITERATIONS)
        .ok_or(Error::NoConvergence("symmetric eigendecomposition"))?;
    let raw_values: Vec<f64> = raw.eigenvalues.iter().copied().collect();
    let order = descending_order(&raw_values);
    let top = raw_values[order[0]].max(0.0);
    let floor = -PSD_FLOOR * top;

    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let l = raw_values[src];
        if l < floor {
            return Err(Error::Indefinite { eigenvalue: l, floor });
        }
        values.push(l.max(0.0));
        let sign = canonical_sign(raw.eigenvectors.column(src).iter());
        vectors.set_column(dst, &(raw.eigenvectors.column(src) * sign));
    }
    Ok(PsdEigen { values, vectors })
}

/// `(E^{1/2})^†` for symmetric PSD `E`.
pub fn sqrt_pinv(e: &Matrix) -> Result<Matrix> {
    Ok(psd_eig(e)?.spectral_map(|l| 1.0 / l.sqrt()))
}

/// `E^†` for symmetric PSD `E`, using the same spectral cutoff as
/// [`sqrt_pinv`] so that `E^† = ((E^{1/2})^†)^2` holds exactly in rank.
pub fn psd_pinv(e: &Matrix) -> Result<Matrix> {
    Ok(psd_eig(e)?.spectral_map(|l| 1.0 / l))
}
