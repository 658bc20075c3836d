use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{parse_ranks, DataSource, DemoSpec, RunConfig};
use super::demo::{self, DEMO_LABEL};
use super::{Axis, CliError, CliResult, DemoArgs, FitArgs, IterateArgs, SweepArgs, VerifyArgs};
use crate::decorrelate::{decorrelate, DecorrelatedSystem, UNCORRELATED_TOL, WELL_DEFINED_TOL};
use crate::ensemble::{format_float, load_csv, omega_norm_sq, save_csv, Orientation, SampleEnsemble};
use crate::error::{Error, Result};
use crate::estimator::{
    diagnostics, empirical_error, fit_full_rank, fit_rank_constrained, predicted_error_full, predicted_error_rank,
    BlockOperator, ErrorDiagnostics, Estimator, EstimatorArtifact, RankProfile, ARTIFACT_VERSION, NEGATIVE_ERROR_TOL,
};
use crate::family::InjectionFamily;
use crate::injection_opt::{iterate_from, Branch, IterationConfig, IterationOutcome, StopReason};
use crate::oracle::{naive_objective, verify_battery, OracleReport, VerifyOptions};

const TOOL: &str = "optinject";
const VERSION: &str = env!("CARGO_PKG_VERSION");
const AGREEMENT_TOL: f64 = 1e-8;
const NAIVE_TOL: f64 = 1e-12;
const EPS_TOL: f64 = 1e-10;

struct Loaded {
    x: SampleEnsemble,
    y: SampleEnsemble,
    demo: Option<DemoSpec>,
}

impl Loaded {
    fn origin(&self) -> String {
        match self.demo {
            Some(_) => DEMO_LABEL.to_string(),
            None => "files".to_string(),
        }
    }
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    match &cfg.data {
        DataSource::Files { x, y } => {
            let xs = load_csv(x, cfg.orientation())?;
            let ys = load_csv(y, cfg.orientation())?;
            if xs.n_samples() != ys.n_samples() {
                return Err(Error::Data {
                    path: y.display().to_string(),
                    message: format!("{} samples, but {} has {}", ys.n_samples(), x.display(), xs.n_samples()),
                });
            }
            Ok(Loaded { x: xs, y: ys, demo: None })
        }
        DataSource::Demo(spec) => {
            let d = demo::generate(spec)?;
            Ok(Loaded {
                x: d.x,
                y: d.y,
                demo: Some(*spec),
            })
        }
    }
}

fn profile(ranks: &[usize], family: &InjectionFamily, data: &Loaded) -> Result<RankProfile> {
    if ranks.len() != family.degree() + 1 {
        return Err(Error::Rank(format!(
            "{} ranks given, but {} injections need {} (r_0 .. r_p)",
            ranks.len(),
            family.degree(),
            family.degree() + 1
        )));
    }
    RankProfile::new(ranks.to_vec(), data.x.dim(), data.y.dim())
}

fn system(y: &SampleEnsemble, family: &InjectionFamily) -> Result<DecorrelatedSystem> {
    let mut stack = vec![y.clone()];
    stack.extend(family.generate(y)?);
    decorrelate(&stack)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Debug, Serialize)]
struct Tolerances {
    error_agreement: f64,
    naive_objective: f64,
    iteration_eps: f64,
    negative_error_clamp: f64,
    pairwise_uncorrelated: f64,
    well_defined: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            error_agreement: AGREEMENT_TOL,
            naive_objective: NAIVE_TOL,
            iteration_eps: EPS_TOL,
            negative_error_clamp: NEGATIVE_ERROR_TOL,
            pairwise_uncorrelated: UNCORRELATED_TOL,
            well_defined: WELL_DEFINED_TOL,
        }
    }
}

#[derive(Debug, Serialize)]
struct DataSummary {
    m: usize,
    n: usize,
    n_samples: usize,
    p: usize,
    dims: Vec<usize>,
    r: usize,
    reduction_ratio: f64,
}

/// `predicted` against `empirical`; gaps are relative to `tr(E_xx)`.
#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    predicted: f64,
    empirical: f64,
    abs_gap: f64,
    rel_gap: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn new(name: &'static str, predicted: f64, empirical: f64, trace: f64, tolerance: f64) -> Self {
        let abs_gap = (predicted - empirical).abs();
        let scale = if trace > 0.0 { trace } else { 1.0 };
        Self {
            name,
            predicted,
            empirical,
            abs_gap,
            rel_gap: abs_gap / scale,
            tolerance,
            pass: abs_gap <= tolerance * scale,
        }
    }
}

#[derive(Debug, Serialize)]
struct IterationSummary {
    b_mode: String,
    initial_eps: f64,
    final_eps: f64,
    loops: usize,
    stop_reason: StopReason,
    z_branches: usize,
    gh_branches: usize,
    singular_fredholm_loops: usize,
    max_increase: f64,
    trace_path: String,
}

#[derive(Debug, Serialize)]
struct Timings {
    total_ms: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    data_origin: String,
    config: RunConfig,
    tolerances: Tolerances,
    data: DataSummary,
    checks: Vec<Check>,
    diagnostics: ErrorDiagnostics,
    iteration: Option<IterationSummary>,
    estimator_path: String,
    timings: Option<Timings>,
}

struct Fitted {
    data: Loaded,
    sys: DecorrelatedSystem,
    ranks: RankProfile,
    estimator: Estimator,
    summary: DataSummary,
    checks: Vec<Check>,
}

fn fit_pipeline(cfg: &RunConfig) -> Result<Fitted> {
    let data = load(cfg)?;
    let ranks = profile(cfg.require_ranks()?, &cfg.injections, &data)?;
    let sys = system(&data.y, &cfg.injections)?;
    let estimator = fit_rank_constrained(&data.x, &sys, &ranks)?;
    let full = fit_full_rank(&data.x, &sys)?;
    let trace = omega_norm_sq(&data.x);
    let empirical = empirical_error(&data.x, &estimator, sys.z())?;
    let checks = vec![
        Check::new(
            "predicted-vs-empirical-rank",
            predicted_error_rank(&data.x, &sys, &ranks)?,
            empirical,
            trace,
            AGREEMENT_TOL,
        ),
        Check::new(
            "predicted-vs-empirical-full",
            predicted_error_full(&data.x, &sys)?,
            empirical_error(&data.x, &full, sys.z())?,
            trace,
            AGREEMENT_TOL,
        ),
        Check::new(
            "naive-vs-vectorized-objective",
            naive_objective(&data.x, &estimator.block_products(), sys.z())?,
            empirical,
            trace,
            NAIVE_TOL,
        ),
    ];
    let summary = DataSummary {
        m: data.x.dim(),
        n: data.y.dim(),
        n_samples: data.x.n_samples(),
        p: sys.degree(),
        dims: sys.dims(),
        r: ranks.total(),
        reduction_ratio: ranks.reduction_ratio(),
    };
    Ok(Fitted {
        data,
        sys,
        ranks,
        estimator,
        summary,
        checks,
    })
}

fn artifact(cfg: &RunConfig, fitted: &Fitted, estimator: Estimator, with_full: bool) -> Result<EstimatorArtifact> {
    Ok(EstimatorArtifact {
        version: ARTIFACT_VERSION.into(),
        output_dim: fitted.data.x.dim(),
        input_dim: fitted.data.y.dim(),
        injections: cfg.injections.to_string(),
        ranks: fitted.ranks.ranks().to_vec(),
        estimator,
        full_rank: if with_full {
            Some(fit_full_rank(&fitted.data.x, &fitted.sys)?)
        } else {
            None
        },
    })
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let start = Instant::now();
    let cfg = RunConfig::resolve(&args.run, "out")?;
    let fitted = fit_pipeline(&cfg)?;
    let diag = diagnostics(&fitted.data.x, &fitted.sys, &fitted.ranks, args.split)?;
    let est_path = cfg.out.join("estimator.json");
    let art = artifact(&cfg, &fitted, fitted.estimator.clone(), true)?;
    write_text(&est_path, &art.to_json()?)?;
    let report = Report {
        tool: TOOL,
        version: VERSION,
        command: "fit",
        data_origin: fitted.data.origin(),
        tolerances: Tolerances::default(),
        data: fitted.summary,
        checks: fitted.checks,
        diagnostics: diag,
        iteration: None,
        estimator_path: est_path.display().to_string(),
        timings: cfg.timings.then(|| Timings {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        }),
        config: cfg.clone(),
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    println!(
        "fit: predicted error {} (empirical {}), estimator {}",
        format_float(report.checks[0].predicted),
        format_float(report.checks[0].empirical),
        report.estimator_path
    );
    Ok(())
}

fn summarize(outcome: &IterationOutcome, cfg: &RunConfig, trace_path: &Path) -> IterationSummary {
    let eps = outcome.trace.eps_sequence();
    let max_increase = eps.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let records = &outcome.trace.records;
    IterationSummary {
        b_mode: cfg.b_mode.to_string(),
        initial_eps: outcome.trace.initial_eps,
        final_eps: outcome.trace.final_eps(),
        loops: records.len(),
        stop_reason: outcome.trace.stop_reason,
        z_branches: records.iter().filter(|r| r.branch == Branch::Z).count(),
        gh_branches: records.iter().filter(|r| r.branch == Branch::Gh).count(),
        singular_fredholm_loops: records.iter().filter(|r| r.singular_fredholm).count(),
        max_increase: if max_increase.is_finite() { max_increase } else { 0.0 },
        trace_path: trace_path.display().to_string(),
    }
}

pub fn cmd_iterate(args: &IterateArgs) -> CliResult<()> {
    let start = Instant::now();
    let cfg = RunConfig::resolve(&args.run, "out")?;
    let mut fitted = fit_pipeline(&cfg)?;
    let diag = diagnostics(&fitted.data.x, &fitted.sys, &fitted.ranks, None)?;
    let iter_cfg = IterationConfig {
        delta: cfg.delta,
        max_iter: cfg.max_iter,
        b_mode: cfg.b_mode,
        timings: cfg.timings,
    };
    let injections = cfg.injections.generate(&fitted.data.y)?;
    let outcome = iterate_from(&fitted.data.x, &fitted.data.y, injections, &fitted.ranks, &iter_cfg, false)?;

    let trace_path = cfg.trace.clone().unwrap_or_else(|| cfg.out.join("trace.csv"));
    write_text(&trace_path, &outcome.trace.to_csv())?;
    if args.dump_injections {
        for (j, v) in outcome.injections.iter().enumerate() {
            let path = cfg.out.join("injections").join(format!("v_{}.csv", j + 1));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            save_csv(v, &path, cfg.orientation())?;
        }
    }

    let trace = omega_norm_sq(&fitted.data.x);
    let final_emp = empirical_error(&fitted.data.x, &outcome.estimator, &outcome.z)?;
    fitted.checks.push(Check::new(
        "final-eps-vs-empirical",
        outcome.trace.final_eps(),
        final_emp,
        trace,
        EPS_TOL,
    ));
    let est_path = cfg.out.join("estimator.json");
    let art = artifact(&cfg, &fitted, outcome.estimator.clone(), false)?;
    write_text(&est_path, &art.to_json()?)?;
    let summary = summarize(&outcome, &cfg, &trace_path);
    println!(
        "iterate: eps {} -> {} in {} loop(s), stopped by {}",
        format_float(summary.initial_eps),
        format_float(summary.final_eps),
        summary.loops,
        summary.stop_reason
    );
    let report = Report {
        tool: TOOL,
        version: VERSION,
        command: "iterate",
        data_origin: fitted.data.origin(),
        tolerances: Tolerances::default(),
        data: fitted.summary,
        checks: fitted.checks,
        diagnostics: diag,
        iteration: Some(summary),
        estimator_path: est_path.display().to_string(),
        timings: cfg.timings.then(|| Timings {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        }),
        config: cfg.clone(),
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(())
}

/// One sweep point: the family, rank profile and label it evaluates.
struct SweepPoint {
    label: String,
    family: InjectionFamily,
    ranks: Vec<usize>,
}

fn sweep_points(cfg: &RunConfig, axis: Axis, values: &str) -> Result<Vec<SweepPoint>> {
    let parts: Vec<&str> = match axis {
        Axis::Rank => values.split(';').map(str::trim).filter(|s| !s.is_empty()).collect(),
        _ => values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
    };
    if parts.is_empty() {
        return Err(Error::Config("--values is empty".into()));
    }
    let mut points = Vec::with_capacity(parts.len());
    match axis {
        Axis::Rank => {
            let mut prev: Option<Vec<usize>> = None;
            for part in parts {
                let ranks = parse_ranks(part)?;
                if let Some(p) = &prev {
                    if p.len() != ranks.len() || p.iter().zip(&ranks).any(|(a, b)| b < a) {
                        return Err(Error::Config(format!(
                            "rank axis values must be componentwise non-decreasing profiles of one length ({part:?})"
                        )));
                    }
                }
                prev = Some(ranks.clone());
                points.push(SweepPoint {
                    label: ranks.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
                    family: cfg.injections.clone(),
                    ranks,
                });
            }
        }
        Axis::Q => {
            let last = cfg
                .injections
                .kinds
                .last()
                .ok_or_else(|| Error::Config("the q axis needs at least one injection".into()))?;
            let mut prev = 0;
            for part in parts {
                let q: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("q axis value {part:?} is not an integer")))?;
                if q == 0 || q < prev {
                    return Err(Error::Config("q axis values must be positive and non-decreasing".into()));
                }
                prev = q;
                let kind = last.with_dim(q).ok_or_else(|| {
                    Error::Config("the q axis varies the last injection, which must be fourier or lift".into())
                })?;
                let mut family = cfg.injections.clone();
                *family.kinds.last_mut().expect("non-empty") = kind;
                points.push(SweepPoint {
                    label: q.to_string(),
                    family,
                    ranks: cfg.require_ranks()?.to_vec(),
                });
            }
        }
        Axis::Degree => {
            let ranks = cfg.require_ranks()?;
            let mut prev = 0;
            for part in parts {
                let p: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("degree axis value {part:?} is not an integer")))?;
                if p < prev {
                    return Err(Error::Config("degree axis values must be non-decreasing".into()));
                }
                if p > cfg.injections.degree() || p + 1 > ranks.len() {
                    return Err(Error::Config(format!(
                        "degree {p} needs {} injections and {} ranks",
                        p,
                        p + 1
                    )));
                }
                prev = p;
                points.push(SweepPoint {
                    label: p.to_string(),
                    family: cfg.injections.truncated(p),
                    ranks: ranks[..=p].to_vec(),
                });
            }
        }
    }
    Ok(points)
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(&args.run, "out")?;
    let data = load(&cfg)?;
    let points = sweep_points(&cfg, args.axis, &args.values)?;
    let axis = match args.axis {
        Axis::Rank => "rank",
        Axis::Q => "q",
        Axis::Degree => "degree",
    };
    let mut csv = String::from("axis,value,ranks,injections,predicted_error,empirical_error,full_rank_error\n");
    for point in &points {
        let ranks = profile(&point.ranks, &point.family, &data)?;
        let sys = system(&data.y, &point.family)?;
        let est = fit_rank_constrained(&data.x, &sys, &ranks)?;
        csv.push_str(&format!(
            "{axis},{},{},{},{},{},{}\n",
            point.label,
            point.ranks.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
            point.family.to_string().replace(',', " "),
            format_float(predicted_error_rank(&data.x, &sys, &ranks)?),
            format_float(empirical_error(&data.x, &est, sys.z())?),
            format_float(predicted_error_full(&data.x, &sys)?),
        ));
    }
    write_text(&cfg.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_demo(args: &DemoArgs) -> CliResult<()> {
    let spec = DemoSpec {
        seed: args.seed,
        m: args.m,
        n: args.n,
        samples: args.samples,
        noise: args.noise,
        nonlinearity: args.nonlinearity.parse()?,
    };
    let data = demo::generate(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let orientation = Orientation::from_transpose_flag(args.transpose);
    save_csv(&data.x, &args.out.join("x.csv"), orientation)?;
    save_csv(&data.y, &args.out.join("y.csv"), orientation)?;
    write_json(&args.out.join("manifest.json"), &data.manifest)?;
    println!("demo: wrote x.csv, y.csv and manifest.json to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerifyOutput {
    tool: &'static str,
    version: &'static str,
    data_origin: String,
    estimator: String,
    all_pass: bool,
    reports: Vec<OracleReport>,
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(&args.run, "out")?;
    let seed = cfg
        .seed
        .or(match cfg.data {
            DataSource::Demo(spec) => Some(spec.seed),
            DataSource::Files { .. } => None,
        })
        .ok_or_else(|| Error::Config("verify draws random candidates and needs --seed".into()))?;
    let data = load(&cfg)?;
    let (family, ranks_list, est, source) = match &args.estimator {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let art = EstimatorArtifact::from_json(&text).map_err(|e| match e {
                Error::Serde(inner) => Error::Data {
                    path: path.display().to_string(),
                    message: inner.to_string(),
                },
                other => other,
            })?;
            let family: InjectionFamily = art.injections.parse()?;
            (family, art.ranks, art.estimator, path.display().to_string())
        }
        None => {
            let ranks = cfg.require_ranks()?.to_vec();
            let ranks_p = profile(&ranks, &cfg.injections, &data)?;
            let sys = system(&data.y, &cfg.injections)?;
            let est = fit_rank_constrained(&data.x, &sys, &ranks_p)?;
            (cfg.injections.clone(), ranks, est, "fitted".to_string())
        }
    };
    let ranks = profile(&ranks_list, &family, &data)?;
    let sys = system(&data.y, &family)?;
    let opts = VerifyOptions {
        candidates: args.candidates,
        z_candidates: args.z_candidates,
        magnitude: args.magnitude,
        seed,
    };
    let reports = verify_battery(&data.x, &sys, &ranks, &est, &opts)?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    for r in &reports {
        println!(
            "{} {} primary={} oracle={} rel_gap={} tol={}",
            if r.pass { "PASS" } else { "FAIL" },
            r.check,
            format_float(r.primary),
            format_float(r.oracle),
            format_float(r.rel_gap),
            format_float(r.tolerance)
        );
    }
    let out = VerifyOutput {
        tool: TOOL,
        version: VERSION,
        data_origin: data.origin(),
        estimator: source,
        all_pass: failed == 0,
        reports,
    };
    write_json(&cfg.out.join("verify.json"), &out)?;
    if failed > 0 {
        return Err(CliError::VerifyFailed(failed));
    }
    Ok(())
}
