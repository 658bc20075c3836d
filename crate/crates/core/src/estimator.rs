//! Closed-form block estimators and their error formulas.
//!
//! For pairwise uncorrelated `z_0 .. z_p` the objective
//! `||x - sum_j G_j H_j z_j||_Omega^2` splits into independent per-block
//! problems. Block `j` of the rank-constrained solution is
//! `G_j = U_{Gamma_j, r_j}`, `H_j = G_j^T E_{x z_j} E_{z_j z_j}^†`, and the
//! full-rank solution is `P_j = E_{x z_j} E_{z_j z_j}^†`. Both errors have
//! closed forms in the singular values of `A_j = E_{x z_j} (E_{z_j z_j}^{1/2})^†`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::decorrelate::{gamma_with, well_defined_from_gamma, DecorrelatedSystem, WELL_DEFINED_TOL};
use crate::ensemble::{estimate_cov, omega_norm_sq, SampleEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, psd_eig, sqrt_pinv, svd, Matrix};

pub const ARTIFACT_VERSION: &str = "optinject-est-v1";
/// Predicted errors down to `-NEGATIVE_ERROR_TOL * tr(E_xx)` clamp to zero.
pub const NEGATIVE_ERROR_TOL: f64 = 1e-9;

/// Degrees `r_0 .. r_p` with `0 < r_j` and `sum r_j <= min(m, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankProfile {
    ranks: Vec<usize>,
    m: usize,
    n: usize,
}

impl RankProfile {
    pub fn new(ranks: Vec<usize>, m: usize, n: usize) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Rank("at least r_0 is required".into()));
        }
        if let Some(j) = ranks.iter().position(|r| *r == 0) {
            return Err(Error::Rank(format!("r_{j} must be positive")));
        }
        let total: usize = ranks.iter().sum();
        let bound = m.min(n);
        if total > bound {
            return Err(Error::Rank(format!(
                "r = {total} violates r ≤ min{{m,n}} = {bound} (m = {m}, n = {n})"
            )));
        }
        Ok(Self { ranks, m, n })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn degree(&self) -> usize {
        self.ranks.len() - 1
    }

    pub fn total(&self) -> usize {
        self.ranks.iter().sum()
    }

    /// `c = r / min(m, n)`.
    pub fn reduction_ratio(&self) -> f64 {
        self.total() as f64 / self.m.min(self.n) as f64
    }

    pub fn prefix(&self, p: usize) -> Result<RankProfile> {
        if p + 1 > self.ranks.len() {
            return Err(Error::Rank(format!("profile has no r_{p}")));
        }
        Self::new(self.ranks[..=p].to_vec(), self.m, self.n)
    }
}

/// Row-major (de)serialization for matrices.
pub mod matrix_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::Matrix;

    #[derive(Serialize, Deserialize)]
    struct Doc {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        Doc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let doc = Doc::deserialize(d)?;
        if doc.data.len() != doc.rows * doc.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix payload has {} entries, expected {}x{}",
                doc.data.len(),
                doc.rows,
                doc.cols
            )));
        }
        if doc.data.iter().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("matrix payload has non-finite entries"));
        }
        Ok(Matrix::from_row_slice(doc.rows, doc.cols, &doc.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// `m x r_j`.
    #[serde(with = "matrix_serde")]
    pub g: Matrix,
    /// `r_j x q_j`.
    #[serde(with = "matrix_serde")]
    pub h: Matrix,
}

impl Block {
    pub fn zeros(m: usize, r: usize, q: usize) -> Self {
        Self {
            g: Matrix::zeros(m, r),
            h: Matrix::zeros(r, q),
        }
    }

    pub fn product(&self) -> Matrix {
        &self.g * &self.h
    }

    pub fn is_zero(&self) -> bool {
        self.g.iter().all(|v| *v == 0.0) || self.h.iter().all(|v| *v == 0.0)
    }
}

/// `T_p = sum_j G_j H_j z_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub blocks: Vec<Block>,
}

/// `S_h = sum_k P_k z_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRankEstimator {
    #[serde(with = "full_blocks")]
    pub blocks: Vec<Matrix>,
}

mod full_blocks {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::matrix_serde;
    use crate::linalg::Matrix;

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "matrix_serde")] Matrix);

    pub fn serialize<S: Serializer>(blocks: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
        let wrapped: Vec<Wrapped> = blocks.iter().cloned().map(Wrapped).collect();
        wrapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
        Ok(Vec::<Wrapped>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

/// Anything that acts on `z_0 .. z_p` through one matrix per block.
pub trait BlockOperator {
    fn block_products(&self) -> Vec<Matrix>;
}

impl BlockOperator for Estimator {
    fn block_products(&self) -> Vec<Matrix> {
        self.blocks.iter().map(Block::product).collect()
    }
}

impl BlockOperator for FullRankEstimator {
    fn block_products(&self) -> Vec<Matrix> {
        self.blocks.clone()
    }
}

impl BlockOperator for [Matrix] {
    fn block_products(&self) -> Vec<Matrix> {
        self.to_vec()
    }
}

impl BlockOperator for Vec<Matrix> {
    fn block_products(&self) -> Vec<Matrix> {
        self.clone()
    }
}

/// Columnwise `sum_j S_j z_j`.
pub fn predict<O: BlockOperator + ?Sized>(op: &O, z: &[SampleEnsemble]) -> Result<SampleEnsemble> {
    predict_products(&op.block_products(), z)
}

pub(crate) fn predict_products(products: &[Matrix], z: &[SampleEnsemble]) -> Result<SampleEnsemble> {
    if products.len() != z.len() {
        return Err(Error::shape("predict", format!("{} blocks", z.len()), products.len()));
    }
    let Some(first) = products.first() else {
        return Err(Error::shape("predict", "at least one block", 0));
    };
    let m = first.nrows();
    let n = z[0].n_samples();
    let mut out = Matrix::zeros(m, n);
    for (j, (s, zj)) in products.iter().zip(z).enumerate() {
        if s.nrows() != m || s.ncols() != zj.dim() {
            return Err(Error::shape(
                "predict block",
                format!("block {j}: {m}x{}", zj.dim()),
                format!("{}x{}", s.nrows(), s.ncols()),
            ));
        }
        if zj.n_samples() != n {
            return Err(Error::SampleMismatch {
                left: n,
                right: zj.n_samples(),
            });
        }
        out += s * zj.samples();
    }
    SampleEnsemble::new(out)
}

/// `||x - sum_j S_j z_j||_Omega^2`.
pub fn empirical_error<O: BlockOperator + ?Sized>(x: &SampleEnsemble, op: &O, z: &[SampleEnsemble]) -> Result<f64> {
    let pred = predict(op, z)?;
    Ok(omega_norm_sq(&x.sub(&pred)?))
}

fn check_system(x: &SampleEnsemble, sys: &DecorrelatedSystem) -> Result<()> {
    if sys.is_empty() {
        return Err(Error::shape("decorrelated system", "at least z_0", "empty"));
    }
    x.check_paired(&sys.z()[0])
}

fn check_ranks(x: &SampleEnsemble, sys: &DecorrelatedSystem, ranks: &[usize]) -> Result<()> {
    check_system(x, sys)?;
    if ranks.len() != sys.len() {
        return Err(Error::Rank(format!(
            "{} ranks given for {} blocks (p = {})",
            ranks.len(),
            sys.len(),
            sys.degree()
        )));
    }
    if let Some(j) = ranks.iter().position(|r| *r > x.dim()) {
        return Err(Error::Rank(format!("r_{j} = {} exceeds m = {}", ranks[j], x.dim())));
    }
    Ok(())
}

/// Rank-constrained block for one `z_j`.
pub(crate) fn fit_block(
    e_xz: &Matrix,
    cov_pinv: &Matrix,
    rank: usize,
    trace_exx: f64,
    j: usize,
) -> Result<Block> {
    let m = e_xz.nrows();
    let q = e_xz.ncols();
    let gamma = gamma_with(e_xz, cov_pinv)?;
    if !well_defined_from_gamma(&gamma, trace_exx, WELL_DEFINED_TOL) {
        warn!("injection {j} is ill-defined (Gamma = O); its block is set to zero");
        return Ok(Block::zeros(m, rank, q));
    }
    let eig = psd_eig(&gamma)?;
    let g = eig.vectors.columns(0, rank).into_owned();
    let h = g.transpose() * e_xz * cov_pinv;
    Ok(Block { g, h })
}

/// Minimal-Frobenius-norm rank-constrained estimator.
pub fn fit_rank_constrained(x: &SampleEnsemble, sys: &DecorrelatedSystem, ranks: &RankProfile) -> Result<Estimator> {
    check_ranks(x, sys, ranks.ranks())?;
    let trace = omega_norm_sq(x);
    let blocks = sys
        .z()
        .iter()
        .enumerate()
        .map(|(j, zj)| fit_block(&estimate_cov(x, zj)?, sys.cov_pinv(j), ranks.ranks()[j], trace, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimator { blocks })
}

/// `P_k = E_{x z_k} E_{z_k z_k}^†` for every block.
pub fn fit_full_rank(x: &SampleEnsemble, sys: &DecorrelatedSystem) -> Result<FullRankEstimator> {
    check_system(x, sys)?;
    let blocks = sys
        .z()
        .iter()
        .enumerate()
        .map(|(j, zj)| Ok(estimate_cov(x, zj)? * sys.cov_pinv(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FullRankEstimator { blocks })
}

/// `A_j = E_{x z_j} (E_{z_j z_j}^{1/2})^†`.
pub fn a_matrix(x: &SampleEnsemble, z_j: &SampleEnsemble, cov_zz: &Matrix) -> Result<Matrix> {
    Ok(estimate_cov(x, z_j)? * sqrt_pinv(cov_zz)?)
}

fn clamp_error(value: f64, trace: f64, what: &str) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -NEGATIVE_ERROR_TOL * trace.max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "{what} is negative ({value:e}) beyond tolerance; covariances are inconsistent"
        )))
    }
}

struct BlockSpectrum {
    a: Matrix,
    singular_values: Vec<f64>,
    well_defined: bool,
}

fn block_spectra(x: &SampleEnsemble, sys: &DecorrelatedSystem) -> Result<Vec<BlockSpectrum>> {
    let trace = omega_norm_sq(x);
    sys.z()
        .iter()
        .enumerate()
        .map(|(j, zj)| {
            let e_xz = estimate_cov(x, zj)?;
            let a = &e_xz * sqrt_pinv(sys.cov(j))?;
            let singular_values = svd(&a)?.singular_values;
            let gamma = gamma_with(&e_xz, sys.cov_pinv(j))?;
            Ok(BlockSpectrum {
                a,
                singular_values,
                well_defined: well_defined_from_gamma(&gamma, trace, WELL_DEFINED_TOL),
            })
        })
        .collect()
}

fn head_energy(sv: &[f64], r: usize) -> f64 {
    sv.iter().take(r).map(|s| s * s).sum()
}

fn rank_error_from_spectra(trace: f64, spectra: &[BlockSpectrum], ranks: &[usize]) -> f64 {
    let captured: f64 = spectra
        .iter()
        .zip(ranks)
        .filter(|(s, _)| s.well_defined)
        .map(|(s, r)| head_energy(&s.singular_values, *r))
        .sum();
    trace - captured
}

/// `tr(E_xx) - sum_j sum_{k <= r_j} sigma_k^2(A_j)`.
pub fn predicted_error_rank(x: &SampleEnsemble, sys: &DecorrelatedSystem, ranks: &RankProfile) -> Result<f64> {
    check_ranks(x, sys, ranks.ranks())?;
    predicted_error_for(x, sys, ranks.ranks())
}

/// Same as [`predicted_error_rank`] without profile validation (used for
/// the degree-comparison instance, whose last rank is a merged sum).
pub(crate) fn predicted_error_for(x: &SampleEnsemble, sys: &DecorrelatedSystem, ranks: &[usize]) -> Result<f64> {
    let trace = omega_norm_sq(x);
    let spectra = block_spectra(x, sys)?;
    clamp_error(rank_error_from_spectra(trace, &spectra, ranks), trace, "predicted error")
}

/// `tr(E_xx) - sum_j ||A_j||_F^2`.
pub fn predicted_error_full(x: &SampleEnsemble, sys: &DecorrelatedSystem) -> Result<f64> {
    check_system(x, sys)?;
    let trace = omega_norm_sq(x);
    let mut total = 0.0;
    for (j, zj) in sys.z().iter().enumerate() {
        total += frobenius_sq(&a_matrix(x, zj, sys.cov(j))?);
    }
    clamp_error(trace - total, trace, "full-rank predicted error")
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockDiagnostics {
    pub j: usize,
    pub q: usize,
    pub r: usize,
    /// Numerical rank `s_j` of `A_j`.
    pub rank_a: usize,
    pub singular_values: Vec<f64>,
    /// `sum_{k <= r_j} sigma_k^2(A_j)`.
    pub captured: f64,
    /// `||A_j||_F^2`.
    pub total: f64,
    /// Per column `k` of `A_j`: `sum_i (a_ik^2 - b_ik^2)` with `B = A_j - [A_j]_{r_j}`.
    pub column_gains: Vec<f64>,
    /// Largest column gain.
    pub max_gain: f64,
    pub well_defined: bool,
    #[serde(skip)]
    pub a: Matrix,
    #[serde(skip)]
    pub a_truncated: Matrix,
}

/// Fixed-`r` comparison between degree `p` and a lower degree `g` whose last
/// block absorbs `l_g = r_g + .. + r_p`.
#[derive(Debug, Clone, Serialize)]
pub struct DegreeCheck {
    pub g: usize,
    pub l_g: usize,
    /// `sum_{k = r_g + 1}^{l_g} sigma_k^2(A_g)`.
    pub lhs: f64,
    /// `sum_{j > g} sum_{k <= r_j} sigma_k^2(A_j)`.
    pub rhs: f64,
    pub condition_holds: bool,
    pub error_degree_g: f64,
    pub error_degree_p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorDiagnostics {
    pub trace_exx: f64,
    pub predicted_error: f64,
    pub full_rank_error: f64,
    /// `tr(E_xx - sum_j A_j A_j^T)`.
    pub alpha0: f64,
    pub blocks: Vec<BlockDiagnostics>,
    /// `max_{j >= 1} gamma_(j)`; zero when `p = 0`.
    pub gamma: f64,
    /// `q = q_1 + .. + q_p`.
    pub q_total: usize,
    /// Realized `q * beta`: the sum of all column gains over `j >= 1`.
    pub q_beta: f64,
    pub beta: Option<f64>,
    /// `tr(E_xx) - sum_{k <= r_0} sigma_k^2(A_0)`.
    pub bound_numerator: f64,
    pub degree_check: Option<DegreeCheck>,
}

pub fn diagnostics(
    x: &SampleEnsemble,
    sys: &DecorrelatedSystem,
    ranks: &RankProfile,
    split: Option<usize>,
) -> Result<ErrorDiagnostics> {
    check_ranks(x, sys, ranks.ranks())?;
    let r = ranks.ranks();
    let trace = omega_norm_sq(x);
    let spectra = block_spectra(x, sys)?;

    let mut blocks = Vec::with_capacity(spectra.len());
    for (j, s) in spectra.iter().enumerate() {
        let dec = svd(&s.a)?;
        let a_truncated = dec.truncate(r[j]);
        let residual = &s.a - &a_truncated;
        let column_gains: Vec<f64> = (0..s.a.ncols())
            .map(|k| s.a.column(k).norm_squared() - residual.column(k).norm_squared())
            .collect();
        blocks.push(BlockDiagnostics {
            j,
            q: s.a.ncols(),
            r: r[j],
            rank_a: dec.rank(crate::linalg::default_tolerance(s.a.nrows(), s.a.ncols())),
            captured: head_energy(&s.singular_values, r[j]),
            total: frobenius_sq(&s.a),
            max_gain: column_gains.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            column_gains,
            singular_values: s.singular_values.clone(),
            well_defined: s.well_defined,
            a: s.a.clone(),
            a_truncated,
        });
    }

    let predicted_error = clamp_error(rank_error_from_spectra(trace, &spectra, r), trace, "predicted error")?;
    let alpha0 = clamp_error(trace - blocks.iter().map(|b| b.total).sum::<f64>(), trace, "alpha0")?;
    let q_total: usize = blocks.iter().skip(1).map(|b| b.q).sum();
    let q_beta: f64 = blocks.iter().skip(1).map(|b| b.column_gains.iter().sum::<f64>()).sum();
    let gamma = blocks.iter().skip(1).map(|b| b.max_gain).fold(0.0, f64::max);

    let degree_check = match split {
        None => None,
        Some(g) => Some(degree_check(x, sys, r, g, &spectra, predicted_error)?),
    };

    Ok(ErrorDiagnostics {
        trace_exx: trace,
        predicted_error,
        full_rank_error: alpha0,
        alpha0,
        bound_numerator: trace - blocks[0].captured,
        gamma,
        q_total,
        q_beta,
        beta: (q_total > 0).then(|| q_beta / q_total as f64),
        blocks,
        degree_check,
    })
}

fn degree_check(
    x: &SampleEnsemble,
    sys: &DecorrelatedSystem,
    r: &[usize],
    g: usize,
    spectra: &[BlockSpectrum],
    error_degree_p: f64,
) -> Result<DegreeCheck> {
    let p = r.len() - 1;
    if g >= p {
        return Err(Error::Config(format!("split index g = {g} must be below p = {p}")));
    }
    let l_g: usize = r[g..].iter().sum();
    let sv_g = &spectra[g].singular_values;
    let lhs: f64 = sv_g.iter().take(l_g).skip(r[g]).map(|s| s * s).sum();
    let rhs: f64 = spectra[g + 1..]
        .iter()
        .zip(&r[g + 1..])
        .map(|(s, rj)| head_energy(&s.singular_values, *rj))
        .sum();
    let mut lower = r[..g].to_vec();
    lower.push(l_g);
    let error_degree_g = predicted_error_for(x, &sys.prefix(g), &lower)?;
    Ok(DegreeCheck {
        g,
        l_g,
        lhs,
        rhs,
        condition_holds: lhs < rhs,
        error_degree_g,
        error_degree_p,
    })
}

/// On-disk estimator document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorArtifact {
    pub version: String,
    pub output_dim: usize,
    pub input_dim: usize,
    pub injections: String,
    pub ranks: Vec<usize>,
    pub estimator: Estimator,
    pub full_rank: Option<FullRankEstimator>,
}

impl EstimatorArtifact {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let art: EstimatorArtifact = serde_json::from_str(text)?;
        if art.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "estimator version {:?} is not {ARTIFACT_VERSION:?}",
                art.version
            )));
        }
        if art.estimator.blocks.len() != art.ranks.len() {
            return Err(Error::Config("estimator block count does not match ranks".into()));
        }
        for (j, (b, r)) in art.estimator.blocks.iter().zip(&art.ranks).enumerate() {
            if b.g.nrows() != art.output_dim || b.g.ncols() != *r || b.h.nrows() != *r {
                return Err(Error::shape(
                    "estimator block",
                    format!("block {j}: G {}x{r}, H {r}xq", art.output_dim),
                    format!("G {}x{}, H {}x{}", b.g.nrows(), b.g.ncols(), b.h.nrows(), b.h.ncols()),
                ));
            }
        }
        Ok(art)
    }
}
