//! Independent second computations used by the test suite and `verify`.
//!
//! Nothing here shares a code path with the primary solvers beyond the
//! sample covariance: square roots and pseudo-inverses come from the SVD,
//! objectives from explicit per-sample loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::decorrelate::{check_pairwise_uncorrelated, DecorrelatedSystem, UNCORRELATED_TOL};
use crate::ensemble::{estimate_cov, omega_norm_sq, SampleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::{
    empirical_error, predicted_error_full, predicted_error_rank, Block, BlockOperator, Estimator, RankProfile,
};
use crate::injection_opt::{decoupled_objective, FREDHOLM_TOL};
use crate::linalg::{default_tolerance, pinv, psd_eig, svd, truncated_svd, Matrix};

/// Default relative size of a perturbation.
pub const DEFAULT_MAGNITUDE: f64 = 1e-2;
/// Slack allowed when checking that the primary value is a minimum.
pub const MINIMUM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceDescriptor {
    pub m: usize,
    pub n: usize,
    pub n_samples: usize,
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub seed: Option<u64>,
}

impl InstanceDescriptor {
    pub fn new(x: &SampleEnsemble, z: &[SampleEnsemble], ranks: &[usize], seed: Option<u64>) -> Self {
        Self {
            m: x.dim(),
            n: z.first().map_or(0, SampleEnsemble::dim),
            n_samples: x.n_samples(),
            dims: z.iter().map(SampleEnsemble::dim).collect(),
            ranks: ranks.to_vec(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    /// `|primary - oracle| <= tolerance * scale`.
    Equal,
    /// `primary <= oracle + tolerance * scale`.
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub check: String,
    pub instance: InstanceDescriptor,
    pub relation: Relation,
    pub primary: f64,
    pub oracle: f64,
    pub abs_gap: f64,
    /// `abs_gap / scale`.
    pub rel_gap: f64,
    pub scale: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(
        check: impl Into<String>,
        instance: InstanceDescriptor,
        relation: Relation,
        primary: f64,
        oracle: f64,
        scale: f64,
        tolerance: f64,
    ) -> Self {
        let abs_gap = (primary - oracle).abs();
        let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
        let pass = match relation {
            Relation::Equal => abs_gap <= tolerance * scale,
            Relation::AtMost => primary <= oracle + tolerance * scale,
        };
        Self {
            check: check.into(),
            instance,
            relation,
            primary,
            oracle,
            abs_gap,
            rel_gap: abs_gap / scale,
            scale,
            tolerance,
            pass,
        }
    }
}

/// `(E^{1/2})^†` for symmetric PSD `E` from its SVD.
fn sqrt_pinv_svd(e: &Matrix) -> Result<Matrix> {
    let dec = svd(e)?;
    let tol = default_tolerance(e.nrows(), e.ncols());
    let rank = dec.rank(tol);
    let mut out = Matrix::zeros(e.ncols(), e.nrows());
    for k in 0..rank {
        out += (dec.v.column(k) / dec.singular_values[k].sqrt()) * dec.u.column(k).transpose();
    }
    Ok(out)
}

/// `[A_j]_{r_j} (E_{z_j z_j}^{1/2})^†` with `A_j = E_{x z_j} (E_{z_j z_j}^{1/2})^†`.
pub fn oracle_rank_solution(x: &SampleEnsemble, z_j: &SampleEnsemble, r_j: usize) -> Result<Matrix> {
    let root_pinv = sqrt_pinv_svd(&estimate_cov(z_j, z_j)?)?;
    let a = estimate_cov(x, z_j)? * &root_pinv;
    Ok(truncated_svd(&a, r_j)? * root_pinv)
}

/// `E_{x z_j} E_{z_j z_j}^†` with an SVD pseudo-inverse.
pub fn oracle_full_rank(x: &SampleEnsemble, z_j: &SampleEnsemble) -> Result<Matrix> {
    Ok(estimate_cov(x, z_j)? * pinv(&estimate_cov(z_j, z_j)?, None)?)
}

/// `(1/N) sum_k ||x_k - sum_j S_j z_{j,k}||^2` with scalar loops.
pub fn naive_objective(x: &SampleEnsemble, products: &[Matrix], z: &[SampleEnsemble]) -> Result<f64> {
    if products.len() != z.len() {
        return Err(Error::shape("naive objective", format!("{} blocks", z.len()), products.len()));
    }
    let m = x.dim();
    let n = x.n_samples();
    for (s, zj) in products.iter().zip(z) {
        if s.nrows() != m || s.ncols() != zj.dim() {
            return Err(Error::shape("naive objective block", format!("{m}x{}", zj.dim()), format!("{}x{}", s.nrows(), s.ncols())));
        }
        x.check_paired(zj)?;
    }
    let xs = x.samples();
    let mut total = 0.0;
    for k in 0..n {
        for i in 0..m {
            let mut fitted = 0.0;
            for (s, zj) in products.iter().zip(z) {
                let zs = zj.samples();
                for c in 0..zj.dim() {
                    fitted += s[(i, c)] * zs[(c, k)];
                }
            }
            let r = xs[(i, k)] - fitted;
            total += r * r;
        }
    }
    Ok(total / n as f64)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Adds a random direction of Frobenius norm `magnitude * ||a||_F`
/// (`magnitude` when `a = O`).
fn perturb(a: &Matrix, magnitude: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dir = gaussian(a.nrows(), a.ncols(), rng);
    let norm = dir.norm();
    if norm == 0.0 {
        return a.clone();
    }
    let size = if a.norm() > 0.0 { magnitude * a.norm() } else { magnitude };
    a + dir * (size / norm)
}

/// Stream `k` of the seeded generator; candidates are independent of the
/// order in which they are evaluated.
fn candidate_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Compares the fitted objective with `count` candidates whose factors
/// `G_j, H_j` are randomly perturbed (so every `rank(G_j H_j) <= r_j`).
pub fn perturbation_sweep(
    x: &SampleEnsemble,
    z: &[SampleEnsemble],
    est: &Estimator,
    count: usize,
    magnitude: f64,
    seed: u64,
) -> Result<OracleReport> {
    if count == 0 {
        return Err(Error::Config("perturbation count must be at least 1".into()));
    }
    let primary = empirical_error(x, est, z)?;
    let mut best = f64::INFINITY;
    for k in 0..count {
        let mut rng = candidate_rng(seed, k);
        let blocks = est
            .blocks
            .iter()
            .map(|b| Block {
                g: perturb(&b.g, magnitude, &mut rng),
                h: perturb(&b.h, magnitude, &mut rng),
            })
            .collect();
        best = best.min(empirical_error(x, &Estimator { blocks }, z)?);
    }
    let ranks: Vec<usize> = est.blocks.iter().map(|b| b.g.ncols()).collect();
    Ok(OracleReport::new(
        "rank-constrained-optimality",
        InstanceDescriptor::new(x, z, &ranks, Some(seed)),
        Relation::AtMost,
        primary,
        best,
        omega_norm_sq(x),
        MINIMUM_SLACK,
    ))
}

/// Compares `sum_{j >= 1} ||x - G_j H_j z_j||^2` at `z_tilde` with `count`
/// candidates that perturb every sample column of every `z_j`.
pub fn z_perturbation_sweep(
    x: &SampleEnsemble,
    est: &Estimator,
    z_tilde: &[SampleEnsemble],
    count: usize,
    magnitude: f64,
    seed: u64,
) -> Result<OracleReport> {
    if count == 0 {
        return Err(Error::Config("perturbation count must be at least 1".into()));
    }
    let primary = decoupled_objective(x, est, z_tilde)?;
    let mut best = f64::INFINITY;
    for k in 0..count {
        let mut rng = candidate_rng(seed, k);
        let mut cand = z_tilde.to_vec();
        for zj in cand.iter_mut().skip(1) {
            let mut s = zj.samples().clone();
            for col in 0..s.ncols() {
                let current = Matrix::from_column_slice(zj.dim(), 1, s.column(col).as_slice());
                let bumped = perturb(&current, magnitude, &mut rng);
                s.set_column(col, &bumped.column(0));
            }
            *zj = SampleEnsemble::new(s)?;
        }
        best = best.min(decoupled_objective(x, est, &cand)?);
    }
    let ranks: Vec<usize> = est.blocks.iter().map(|b| b.g.ncols()).collect();
    let scale = omega_norm_sq(x) * est.blocks.len().saturating_sub(1).max(1) as f64;
    Ok(OracleReport::new(
        "z-update-optimality",
        InstanceDescriptor::new(x, z_tilde, &ranks, Some(seed)),
        Relation::AtMost,
        primary,
        best,
        scale,
        MINIMUM_SLACK,
    ))
}

/// `C = B M^T (M M^T)^†` with `M = I - A`, the normal-equations solution of
/// `min_C ||B - C M||_F`. Eigenvalues of `M M^T` at or below
/// `(FREDHOLM_TOL max(1, sigma_max))^2` or `1e-12 lambda_max` count as zero.
pub fn least_squares_oracle(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let q = a.nrows();
    let m = Matrix::identity(q, q) - a;
    let eig = psd_eig(&(&m * m.transpose()))?;
    let top = eig.values.first().copied().unwrap_or(0.0);
    let cut = (FREDHOLM_TOL * top.sqrt().max(1.0)).powi(2).max(1e-12 * top);
    let mut gram_pinv = Matrix::zeros(q, q);
    for (k, &l) in eig.values.iter().enumerate() {
        if l > cut {
            let col = eig.vectors.column(k);
            gram_pinv += (col / l) * col.transpose();
        }
    }
    Ok(b * m.transpose() * gram_pinv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub candidates: usize,
    pub z_candidates: usize,
    pub magnitude: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            candidates: 1000,
            z_candidates: 100,
            magnitude: DEFAULT_MAGNITUDE,
            seed: 0,
        }
    }
}

/// Every oracle check for one instance and a (possibly loaded) estimator.
pub fn verify_battery(
    x: &SampleEnsemble,
    sys: &DecorrelatedSystem,
    ranks: &RankProfile,
    est: &Estimator,
    opts: &VerifyOptions,
) -> Result<Vec<OracleReport>> {
    let z = sys.z();
    if est.blocks.len() != z.len() {
        return Err(Error::shape("verify", format!("{} blocks", z.len()), est.blocks.len()));
    }
    let desc = InstanceDescriptor::new(x, z, ranks.ranks(), Some(opts.seed));
    let trace = omega_norm_sq(x);
    let mut out = Vec::new();

    let unc = check_pairwise_uncorrelated(z, UNCORRELATED_TOL)?;
    out.push(OracleReport::new(
        "pairwise-uncorrelated",
        desc.clone(),
        Relation::Equal,
        unc.relative(),
        0.0,
        1.0,
        UNCORRELATED_TOL,
    ));

    for (j, (block, zj)) in est.blocks.iter().zip(z).enumerate() {
        let primary = block.product();
        let oracle = oracle_rank_solution(x, zj, ranks.ranks()[j])?;
        if primary.shape() != oracle.shape() {
            return Err(Error::shape("verify block", format!("{:?}", oracle.shape()), format!("{:?}", primary.shape())));
        }
        out.push(OracleReport::new(
            format!("two-path-product-{j}"),
            desc.clone(),
            Relation::Equal,
            (&primary - &oracle).norm(),
            0.0,
            oracle.norm().max(trace.sqrt()),
            1e-8,
        ));
    }

    let empirical = empirical_error(x, est, z)?;
    out.push(OracleReport::new(
        "predicted-error-rank",
        desc.clone(),
        Relation::Equal,
        predicted_error_rank(x, sys, ranks)?,
        empirical,
        trace,
        1e-8,
    ));

    let full: Vec<Matrix> = z.iter().map(|zj| oracle_full_rank(x, zj)).collect::<Result<_>>()?;
    out.push(OracleReport::new(
        "predicted-error-full",
        desc.clone(),
        Relation::Equal,
        predicted_error_full(x, sys)?,
        empirical_error(x, &full, z)?,
        trace,
        1e-8,
    ));

    out.push(OracleReport::new(
        "naive-objective",
        desc.clone(),
        Relation::Equal,
        empirical,
        naive_objective(x, &est.block_products(), z)?,
        trace,
        1e-12,
    ));

    out.push(perturbation_sweep(x, z, est, opts.candidates, opts.magnitude, opts.seed)?);

    if z.len() > 1 {
        let z_tilde = crate::injection_opt::optimal_z_update(x, est, z)?;
        out.push(z_perturbation_sweep(x, est, &z_tilde, opts.z_candidates, opts.magnitude, opts.seed)?);
    }
    Ok(out)
}
