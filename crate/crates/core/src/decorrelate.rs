//! Sequential decorrelation of injections and the definitional checks
//! (pairwise uncorrelated, jointly independent, well-defined).
//!
//! `z_0 = v_0 = y` and, for `j >= 1`,
//! `z_j = v_j - sum_{k<j} E_{v_j z_k} E_{z_k z_k}^† z_k`.

use log::warn;

use crate::ensemble::{apply_matrix, estimate_cov, omega_norm_sq, self_cov, SampleEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, numerical_rank, psd_eig, psd_pinv, Matrix};

pub use crate::family::{InjectionFamily, InjectionKind};

/// Directions of `z_j` whose variance falls below this fraction of the
/// largest variance of `v_j` are cancellation residue and are projected out.
pub const COLLAPSE_TOL: f64 = 1e-24;
/// Default tolerance for [`is_well_defined`], relative to `tr(E_xx)`.
pub const WELL_DEFINED_TOL: f64 = 1e-12;
/// Default relative tolerance for [`check_pairwise_uncorrelated`].
pub const UNCORRELATED_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DecorrelatedSystem {
    z: Vec<SampleEnsemble>,
    /// `coeffs[j][k] = E_{v_j z_k} E_{z_k z_k}^†` for `k < j`; `coeffs[0]` is empty.
    coeffs: Vec<Vec<Matrix>>,
    cov: Vec<Matrix>,
    cov_pinv: Vec<Matrix>,
}

impl DecorrelatedSystem {
    /// Wraps ensembles that are already pairwise uncorrelated.
    pub fn from_uncorrelated(z: Vec<SampleEnsemble>) -> Result<Self> {
        check_shared_samples(&z)?;
        let cov: Vec<Matrix> = z.iter().map(self_cov).collect();
        let cov_pinv = cov.iter().map(psd_pinv).collect::<Result<Vec<_>>>()?;
        let coeffs = (0..z.len()).map(|_| Vec::new()).collect();
        Ok(Self {
            z,
            coeffs,
            cov,
            cov_pinv,
        })
    }

    pub fn z(&self) -> &[SampleEnsemble] {
        &self.z
    }

    pub fn into_z(self) -> Vec<SampleEnsemble> {
        self.z
    }

    /// Number of injections (the degree).
    pub fn degree(&self) -> usize {
        self.z.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.z.iter().map(SampleEnsemble::dim).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.z.first().map_or(0, SampleEnsemble::n_samples)
    }

    pub fn coeffs(&self, j: usize) -> &[Matrix] {
        &self.coeffs[j]
    }

    /// `E_{z_j z_j}`.
    pub fn cov(&self, j: usize) -> &Matrix {
        &self.cov[j]
    }

    /// `E_{z_j z_j}^†`.
    pub fn cov_pinv(&self, j: usize) -> &Matrix {
        &self.cov_pinv[j]
    }

    /// First `p + 1` vectors. Decorrelation is sequential, so this is the
    /// system of the degree-`p` sub-family.
    pub fn prefix(&self, p: usize) -> DecorrelatedSystem {
        let len = (p + 1).min(self.z.len());
        Self {
            z: self.z[..len].to_vec(),
            coeffs: self.coeffs[..len].to_vec(),
            cov: self.cov[..len].to_vec(),
            cov_pinv: self.cov_pinv[..len].to_vec(),
        }
    }

    /// Applies the stored transform to `v_j`, i.e. `v_j - sum_k coeffs[j][k] z_k`.
    pub fn reconstruct(&self, j: usize, v_j: &SampleEnsemble) -> Result<SampleEnsemble> {
        let mut out = v_j.samples().clone();
        for (k, c) in self.coeffs[j].iter().enumerate() {
            out -= apply_matrix(c, &self.z[k])?.into_samples();
        }
        SampleEnsemble::new(out)
    }
}

fn check_shared_samples(v: &[SampleEnsemble]) -> Result<()> {
    if let Some(first) = v.first() {
        for other in &v[1..] {
            first.check_paired(other)?;
        }
    }
    Ok(())
}

/// Removes directions whose variance is at cancellation level relative to
/// the source ensemble.
fn drop_collapsed_directions(z: SampleEnsemble, source: &SampleEnsemble, j: usize) -> Result<SampleEnsemble> {
    let source_scale = psd_eig(&self_cov(source))?.values.first().copied().unwrap_or(0.0);
    let eig = psd_eig(&self_cov(&z))?;
    let cut = COLLAPSE_TOL * source_scale;
    let kept = eig.values.iter().filter(|l| **l > cut).count();
    if kept == eig.values.len() {
        return Ok(z);
    }
    warn!(
        "injection {j}: {} of {} directions are linearly dependent on earlier vectors and were removed",
        eig.values.len() - kept,
        eig.values.len()
    );
    let basis = eig.vectors.columns(0, kept);
    let projector = basis * basis.transpose();
    apply_matrix(&projector, &z)
}

/// Pairwise-uncorrelated transform of `v_0 .. v_p` (with `v_0 = y`).
pub fn decorrelate(v: &[SampleEnsemble]) -> Result<DecorrelatedSystem> {
    if v.is_empty() {
        return Err(Error::Config("decorrelate needs at least v_0".into()));
    }
    check_shared_samples(v)?;
    let mut z: Vec<SampleEnsemble> = Vec::with_capacity(v.len());
    let mut coeffs: Vec<Vec<Matrix>> = Vec::with_capacity(v.len());
    let mut cov = Vec::with_capacity(v.len());
    let mut cov_pinv = Vec::with_capacity(v.len());

    for (j, v_j) in v.iter().enumerate() {
        let mut row = Vec::with_capacity(j);
        let mut z_j = v_j.samples().clone();
        for k in 0..j {
            let c = estimate_cov(v_j, &z[k])? * &cov_pinv[k];
            z_j -= &c * z[k].samples();
            row.push(c);
        }
        let mut z_j = SampleEnsemble::new(z_j)?;
        if j > 0 {
            z_j = drop_collapsed_directions(z_j, v_j, j)?;
        }
        let e = self_cov(&z_j);
        cov_pinv.push(psd_pinv(&e)?);
        cov.push(e);
        coeffs.push(row);
        z.push(z_j);
    }
    Ok(DecorrelatedSystem {
        z,
        coeffs,
        cov,
        cov_pinv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncorrelatedReport {
    pub uncorrelated: bool,
    /// Pair `(i, j)` with the largest `||E_{z_i z_j}||_max`.
    pub worst_pair: Option<(usize, usize)>,
    pub worst_value: f64,
    /// `max_j ||E_{z_j z_j}||_max`.
    pub scale: f64,
}

impl UncorrelatedReport {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.worst_value / self.scale
        } else {
            0.0
        }
    }
}

pub fn check_pairwise_uncorrelated(z: &[SampleEnsemble], tol: f64) -> Result<UncorrelatedReport> {
    check_shared_samples(z)?;
    let scale = z.iter().map(|zj| max_abs(&self_cov(zj))).fold(0.0, f64::max);
    let mut worst_pair = None;
    let mut worst_value = 0.0_f64;
    for i in 0..z.len() {
        for j in (i + 1)..z.len() {
            let v = max_abs(&estimate_cov(&z[i], &z[j])?);
            if worst_pair.is_none() || v > worst_value {
                worst_pair = Some((i, j));
                worst_value = v;
            }
        }
    }
    Ok(UncorrelatedReport {
        uncorrelated: worst_value <= tol * scale,
        worst_pair,
        worst_value,
        scale,
    })
}

/// `Gamma_{z_j} = E_{x z_j} E_{z_j z_j}^† E_{z_j x}`.
pub fn gamma(x: &SampleEnsemble, z_j: &SampleEnsemble) -> Result<Matrix> {
    let pinv = psd_pinv(&self_cov(z_j))?;
    gamma_with(&estimate_cov(x, z_j)?, &pinv)
}

/// Gram form `(E_xz P^{1/2})(E_xz P^{1/2})^T` with `P = E_zz^†`.
pub(crate) fn gamma_with(e_xz: &Matrix, cov_pinv: &Matrix) -> Result<Matrix> {
    let a = e_xz * psd_eig(cov_pinv)?.spectral_map(f64::sqrt);
    Ok(&a * a.transpose())
}

/// `||Gamma_{z_j}||_F > tol * tr(E_xx)`.
pub fn is_well_defined(x: &SampleEnsemble, z_j: &SampleEnsemble, tol: f64) -> Result<bool> {
    let g = gamma(x, z_j)?;
    Ok(well_defined_from_gamma(&g, omega_norm_sq(x), tol))
}

pub(crate) fn well_defined_from_gamma(gamma: &Matrix, trace_exx: f64, tol: f64) -> bool {
    gamma.norm() > tol * trace_exx
}

/// Finite-sample proxy for joint independence: the row spaces of the sample
/// matrices `V_0 .. V_p` (subspaces of `R^N`) must form a direct sum, i.e.
/// `rank([V_0; ..; V_p]) == sum_j rank(V_j)` at relative tolerance `tol`.
pub fn check_jointly_independent(v: &[SampleEnsemble], tol: f64) -> Result<bool> {
    check_shared_samples(v)?;
    let Some(first) = v.first() else {
        return Ok(true);
    };
    let n = first.n_samples();
    let total_rows: usize = v.iter().map(SampleEnsemble::dim).sum();
    let mut stacked = Matrix::zeros(total_rows, n);
    let mut block_ranks = 0;
    let mut row = 0;
    for block in v {
        let norm = block.samples().norm();
        if norm > 0.0 {
            let scaled = block.samples() / norm;
            block_ranks += numerical_rank(&scaled, tol)?;
            stacked.rows_mut(row, block.dim()).copy_from(&scaled);
        }
        row += block.dim();
    }
    Ok(numerical_rank(&stacked, tol)? == block_ranks)
}
