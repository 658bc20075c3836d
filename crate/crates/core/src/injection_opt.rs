//! Alternating optimization of the injections.
//!
//! Each loop re-decorrelates the current injections, computes the optimal
//! `z~_j = (G_j H_j)^† x`, recovers injections reproducing them through the
//! finite Fredholm system `C (I - A) = B`, refits the blocks `j >= 1` and
//! keeps whichever of the two candidate pairs has the smaller error. The
//! block for `z_0 = y` stays at its initial value.
//!
//! The incumbent pair `(blocks, z)` always satisfies `eps = error(blocks, z)`.
//! A loop can only replace it by a pair that is not worse, so the recorded
//! error sequence is non-increasing.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::decorrelate::{check_pairwise_uncorrelated, decorrelate, DecorrelatedSystem, UNCORRELATED_TOL};
use crate::ensemble::{estimate_cov, format_float, omega_norm_sq, self_cov, SampleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::{
    empirical_error, fit_block, fit_full_rank, fit_rank_constrained, predict, Block, Estimator, RankProfile,
};
use crate::family::InjectionFamily;
use crate::linalg::{pinv, psd_pinv, svd, Matrix};

pub const DEFAULT_DELTA: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100;
/// `I - A` is treated as singular when its smallest singular value is at
/// most `FREDHOLM_TOL * max(1, sigma_max)`.
pub const FREDHOLM_TOL: f64 = 1e-10;

/// Source of the cross-covariances in the right-hand side `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BMode {
    /// `B_jk = (G_j H_j)^† E_{x z~_k}`.
    #[default]
    Direct,
    /// `x` replaced by its full-rank representation `sum_s P_s z_s` from
    /// the initial system.
    #[serde(rename = "fullrank-init")]
    FullRankInit,
}

impl fmt::Display for BMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BMode::Direct => "direct",
            BMode::FullRankInit => "fullrank-init",
        })
    }
}

impl FromStr for BMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(BMode::Direct),
            "fullrank-init" => Ok(BMode::FullRankInit),
            other => Err(Error::Config(format!(
                "b-mode {other:?} is not one of direct, fullrank-init"
            ))),
        }
    }
}

/// Which candidate pair a loop kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Z,
    Gh,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Z => "z",
            Branch::Gh => "gh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    MaxIter,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Tolerance => "tolerance",
            StopReason::MaxIter => "max-iter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub i: usize,
    pub eps_z: f64,
    pub eps_gh: f64,
    pub eps: f64,
    pub branch: Branch,
    /// Wall time of the loop; zero unless timings were requested.
    pub ms: f64,
    /// Largest relative cross-covariance of the re-decorrelated system the
    /// refit used.
    pub decorrelation_gap: f64,
    /// Whether some `I - A` of this loop fell back to the pseudo-inverse.
    pub singular_fredholm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub initial_eps: f64,
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
}

impl IterationTrace {
    /// `eps^(0), eps^(1), ..`.
    pub fn eps_sequence(&self) -> Vec<f64> {
        std::iter::once(self.initial_eps)
            .chain(self.records.iter().map(|r| r.eps))
            .collect()
    }

    pub fn final_eps(&self) -> f64 {
        self.records.last().map_or(self.initial_eps, |r| r.eps)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,eps_z,eps_gh,eps,branch,ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.i,
                format_float(r.eps_z),
                format_float(r.eps_gh),
                format_float(r.eps),
                r.branch,
                format_float(r.ms)
            ));
        }
        out
    }
}

/// The linear system for one recovered injection.
#[derive(Debug, Clone)]
pub struct FredholmSystem {
    pub j: usize,
    /// `q_j x q`, `q = q_0 + .. + q_{j-1}`.
    pub b: Matrix,
    /// `q x q`.
    pub a: Matrix,
    /// `[C_j0 .. C_j,j-1]`, `q_j x q`.
    pub c: Matrix,
    pub singular: bool,
    /// Block offsets of `z~_0 .. z~_{j-1}` inside `q`.
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationConfig {
    pub delta: f64,
    pub max_iter: usize,
    pub b_mode: BMode,
    pub timings: bool,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            max_iter: DEFAULT_MAX_ITER,
            b_mode: BMode::Direct,
            timings: false,
        }
    }
}

/// Incumbent after a loop.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub estimator: Estimator,
    pub z: Vec<SampleEnsemble>,
    pub injections: Vec<SampleEnsemble>,
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub initial: Estimator,
    pub estimator: Estimator,
    /// `v_1 .. v_p`.
    pub injections: Vec<SampleEnsemble>,
    /// The `z` ensembles paired with `estimator`; `eps = error(estimator, z)`.
    pub z: Vec<SampleEnsemble>,
    pub trace: IterationTrace,
    /// One entry per loop when requested.
    pub snapshots: Vec<Snapshot>,
}

/// `z~_j = (G_j H_j)^† x` for `j >= 1`; `z~_0` and the `z_j` of zero blocks
/// are taken from `previous`.
pub fn optimal_z_update(x: &SampleEnsemble, est: &Estimator, previous: &[SampleEnsemble]) -> Result<Vec<SampleEnsemble>> {
    if previous.len() != est.blocks.len() {
        return Err(Error::shape("z update", format!("{} blocks", est.blocks.len()), previous.len()));
    }
    let mut out = Vec::with_capacity(previous.len());
    out.push(previous[0].clone());
    for (j, block) in est.blocks.iter().enumerate().skip(1) {
        if block.is_zero() {
            warn!("block {j} is zero; z_{j} is left unchanged");
            out.push(previous[j].clone());
            continue;
        }
        let s_pinv = pinv(&block.product(), None)?;
        out.push(SampleEnsemble::new(&s_pinv * x.samples())?);
    }
    Ok(out)
}

/// `sum_{j >= 1} ||x - G_j H_j z_j||_Omega^2`, the objective minimized exactly
/// by [`optimal_z_update`].
pub fn decoupled_objective(x: &SampleEnsemble, est: &Estimator, z: &[SampleEnsemble]) -> Result<f64> {
    let mut total = 0.0;
    for (block, zj) in est.blocks.iter().zip(z).skip(1) {
        let fitted = SampleEnsemble::new(block.product() * zj.samples())?;
        total += omega_norm_sq(&x.sub(&fitted)?);
    }
    Ok(total)
}

/// Solves `C (I - A) = B`. Uses LU when `I - A` is nonsingular, otherwise the
/// minimal-norm least-squares solution `B (I - A)^†`.
pub fn solve_fredholm(b: &Matrix, a: &Matrix) -> Result<(Matrix, bool)> {
    let q = a.nrows();
    if a.ncols() != q || b.ncols() != q {
        return Err(Error::shape(
            "Fredholm system",
            format!("A {q}x{q}, B ?x{q}"),
            format!("A {}x{}, B {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    let m = Matrix::identity(q, q) - a;
    let dec = svd(&m)?;
    let s_max = dec.singular_values.first().copied().unwrap_or(0.0);
    let s_min = dec.singular_values.last().copied().unwrap_or(0.0);
    let cutoff = FREDHOLM_TOL * s_max.max(1.0);
    if q > 0 && s_min > cutoff {
        // C M = B  <=>  M^T C^T = B^T
        if let Some(ct) = m.transpose().lu().solve(&b.transpose()) {
            return Ok((ct.transpose(), false));
        }
    }
    debug!("I - A is singular (sigma_min = {s_min:e}); using the pseudo-inverse");
    let c = if s_max == 0.0 {
        Matrix::zeros(b.nrows(), q)
    } else {
        b * crate::linalg::pinv_from_svd(&dec, cutoff / s_max)
    };
    Ok((c, q > 0))
}

/// Builds and solves the system for `v_j` given `z~_0 .. z~_{j-1}`.
/// `target` is `x` in direct mode and the full-rank representation of `x`
/// otherwise.
pub fn fredholm_system(
    target: &SampleEnsemble,
    block: &Block,
    z_tilde: &[SampleEnsemble],
    j: usize,
) -> Result<FredholmSystem> {
    if j == 0 || j > z_tilde.len() {
        return Err(Error::Config(format!("injection index {j} outside 1..={}", z_tilde.len())));
    }
    let s_pinv = pinv(&block.product(), None)?;
    let dims: Vec<usize> = z_tilde[..j].iter().map(SampleEnsemble::dim).collect();
    let mut offsets = Vec::with_capacity(j);
    let mut q = 0;
    for d in &dims {
        offsets.push(q);
        q += d;
    }
    let qj = s_pinv.nrows();
    let mut b = Matrix::zeros(qj, q);
    let mut a = Matrix::zeros(q, q);
    for l in 0..j {
        let e_ll_pinv = psd_pinv(&self_cov(&z_tilde[l]))?;
        for k in 0..j {
            let e_lk = estimate_cov(&z_tilde[l], &z_tilde[k])?;
            a.view_mut((offsets[l], offsets[k]), (dims[l], dims[k]))
                .copy_from(&(&e_ll_pinv * e_lk));
        }
        let b_l = &s_pinv * estimate_cov(target, &z_tilde[l])?;
        b.view_mut((0, offsets[l]), (qj, dims[l])).copy_from(&b_l);
    }
    let (c, singular) = solve_fredholm(&b, &a)?;
    Ok(FredholmSystem {
        j,
        b,
        a,
        c,
        singular,
        offsets,
    })
}

/// `v_j = (G_j H_j)^† x + sum_l C_jl E_{z~_l z~_l}^† z~_l`.
pub fn recover_injection(
    x: &SampleEnsemble,
    target: &SampleEnsemble,
    block: &Block,
    z_tilde: &[SampleEnsemble],
    j: usize,
) -> Result<(SampleEnsemble, FredholmSystem)> {
    let sys = fredholm_system(target, block, z_tilde, j)?;
    let s_pinv = pinv(&block.product(), None)?;
    let mut v = &s_pinv * x.samples();
    for (l, z_l) in z_tilde[..j].iter().enumerate() {
        let c_l = sys.c.columns(sys.offsets[l], z_l.dim());
        let gamma_l = psd_pinv(&self_cov(z_l))? * z_l.samples();
        v += c_l * gamma_l;
    }
    Ok((SampleEnsemble::new(v)?, sys))
}

/// Refits the blocks `j >= 1` on a pairwise uncorrelated system; block 0 is
/// copied from `block0`.
pub fn refit_blocks(x: &SampleEnsemble, sys: &DecorrelatedSystem, ranks: &RankProfile, block0: &Block) -> Result<Estimator> {
    if ranks.ranks().len() != sys.len() {
        return Err(Error::Rank(format!("{} ranks given for {} blocks", ranks.ranks().len(), sys.len())));
    }
    let trace = omega_norm_sq(x);
    let mut blocks = Vec::with_capacity(sys.len());
    blocks.push(block0.clone());
    for (j, zj) in sys.z().iter().enumerate().skip(1) {
        blocks.push(fit_block(&estimate_cov(x, zj)?, sys.cov_pinv(j), ranks.ranks()[j], trace, j)?);
    }
    Ok(Estimator { blocks })
}

fn state_dump(i: usize, eps: f64, eps_z: f64, eps_gh: f64, est: &Estimator) -> String {
    let norms: Vec<String> = est
        .blocks
        .iter()
        .map(|b| format!("{:e}", b.product().norm()))
        .collect();
    format!(
        "non-finite error at loop {i}: eps = {eps:e}, eps_z = {eps_z:e}, eps_gh = {eps_gh:e}, block norms = [{}]",
        norms.join(", ")
    )
}

/// Runs the iteration from the family's initial injections.
pub fn iterate(
    x: &SampleEnsemble,
    y: &SampleEnsemble,
    family: &InjectionFamily,
    ranks: &RankProfile,
    config: &IterationConfig,
) -> Result<IterationOutcome> {
    iterate_from(x, y, family.generate(y)?, ranks, config, false)
}

/// Runs the iteration from explicit initial injections `v_1 .. v_p`.
pub fn iterate_from(
    x: &SampleEnsemble,
    y: &SampleEnsemble,
    injections: Vec<SampleEnsemble>,
    ranks: &RankProfile,
    config: &IterationConfig,
    keep_snapshots: bool,
) -> Result<IterationOutcome> {
    if config.delta.is_nan() || config.delta <= 0.0 {
        return Err(Error::Config(format!("delta must be positive, got {}", config.delta)));
    }
    if config.max_iter == 0 {
        return Err(Error::Config("max-iter must be at least 1".into()));
    }
    x.check_paired(y)?;
    let mut stack = Vec::with_capacity(injections.len() + 1);
    stack.push(y.clone());
    stack.extend(injections.iter().cloned());
    let sys0 = decorrelate(&stack)?;
    let initial = fit_rank_constrained(x, &sys0, ranks)?;
    let target = match config.b_mode {
        BMode::Direct => x.clone(),
        BMode::FullRankInit => predict(&fit_full_rank(x, &sys0)?, sys0.z())?,
    };

    let mut blocks = initial.clone();
    let mut inj = injections;
    let mut z_pair = sys0.z().to_vec();
    let mut eps = empirical_error(x, &blocks, &z_pair)?;
    if !eps.is_finite() {
        return Err(Error::Numerical(state_dump(0, eps, f64::NAN, f64::NAN, &blocks)));
    }
    let initial_eps = eps;
    let block0 = initial.blocks[0].clone();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut stop_reason = StopReason::MaxIter;
    let loops = if inj.is_empty() {
        stop_reason = StopReason::Tolerance;
        0
    } else {
        config.max_iter
    };

    for i in 0..loops {
        let start = config.timings.then(Instant::now);

        let mut stack = Vec::with_capacity(inj.len() + 1);
        stack.push(y.clone());
        stack.extend(inj.iter().cloned());
        let sys_i = if i == 0 { sys0.clone() } else { decorrelate(&stack)? };
        let gap = check_pairwise_uncorrelated(sys_i.z(), UNCORRELATED_TOL)?.relative();

        let zt = optimal_z_update(x, &blocks, sys_i.z())?;
        let eps_z = empirical_error(x, &blocks, &zt)?;

        let mut new_inj = inj.clone();
        let mut singular = false;
        for j in 1..zt.len() {
            if blocks.blocks[j].is_zero() {
                continue;
            }
            let (v, fs) = recover_injection(x, &target, &blocks.blocks[j], &zt, j)?;
            singular |= fs.singular;
            new_inj[j - 1] = v;
        }

        let new_blocks = refit_blocks(x, &sys_i, ranks, &block0)?;
        let eps_gh = empirical_error(x, &new_blocks, sys_i.z())?;

        let (eps_new, branch) = if eps_z <= eps_gh { (eps_z, Branch::Z) } else { (eps_gh, Branch::Gh) };
        if !eps_new.is_finite() || !eps_z.is_finite() || !eps_gh.is_finite() {
            return Err(Error::Numerical(state_dump(i, eps, eps_z, eps_gh, &blocks)));
        }
        match branch {
            Branch::Z => {
                inj = new_inj;
                z_pair = zt;
            }
            Branch::Gh => {
                blocks = new_blocks;
                z_pair = sys_i.into_z();
            }
        }

        let ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);
        debug!("loop {i}: eps_z = {eps_z:e}, eps_gh = {eps_gh:e}, branch {branch}");
        records.push(IterationRecord {
            i,
            eps_z,
            eps_gh,
            eps: eps_new,
            branch,
            ms,
            decorrelation_gap: gap,
            singular_fredholm: singular,
        });
        if keep_snapshots {
            snapshots.push(Snapshot {
                estimator: blocks.clone(),
                z: z_pair.clone(),
                injections: inj.clone(),
            });
        }
        let change = eps_new - eps;
        eps = eps_new;
        if change * change <= config.delta {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }

    Ok(IterationOutcome {
        initial,
        estimator: blocks,
        injections: inj,
        z: z_pair,
        trace: IterationTrace {
            initial_eps,
            records,
            stop_reason,
        },
        snapshots,
    })
}
