//! Subcommand implementations. Each writes its files under `io.out_dir` and
//! returns a report with the headline numbers.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use slfv_core::analysis::{
    identity_profile, qv_replicate, qv_summarize, replicate_stats, IdentitySample, IdentityTable, QvConfig,
    QvReport,
};
use slfv_core::field::PopulationField;
use slfv_core::numerics::loglog_slope;
use slfv_core::operators::{
    drift_consistency_check, generator_refinement, jump_operator_convergence, ConvergenceStudy, RefinementStudy,
};
use slfv_core::pde::{steady_state, SteadyState};
use slfv_core::predict::{align_prediction, best_alignment, build_kernel, ThetaMatrix};
use slfv_core::sim::{run, EventCounts, InitialState};
use slfv_core::snapshot::{read_snapshot, write_snapshot};
use slfv_core::{Boundary, GrowthSpec, ModelParams, SiteFunction};

use crate::config::ExperimentConfig;
use crate::output::{
    fmt_num, identity_rows, log10_or_na, profile_hash, provenance, read_rows, write_profile, write_rows,
    write_theta, ComparisonRow, IdentityCsvRow, KeyValue, PredictionRow, ReplicateIdentityRow,
};
use crate::HarnessError;

/// Runs `f(0..count)` on a pool of `threads` workers (machine parallelism
/// when `None`) and returns the results in index order.
pub fn parallel_map<T: Send>(
    threads: Option<usize>,
    count: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Result<Vec<T>, HarnessError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t.max(1));
    }
    let pool = b
        .build()
        .map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(f).collect()))
}

fn runtime(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

fn header(cfg: &ExperimentConfig) -> String {
    provenance(&cfg.hash(), &[])
}

pub const PROFILE_FILE: &str = "profile.csv";
pub const IDENTITY_FILE: &str = "identity.csv";
pub const REPLICATE_IDENTITY_FILE: &str = "identity_replicates.csv";
pub const STEADY_FILE: &str = "steady_profile.csv";
pub const THETA_FILE: &str = "theta.csv";
pub const PREDICTION_FILE: &str = "prediction.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const COMPARISON_SUMMARY_FILE: &str = "comparison_summary.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const REFINEMENT_FILE: &str = "generator_refinement.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub table: IdentityTable,
    pub mean_profile: SiteFunction,
    pub counts: EventCounts,
    pub files: Vec<PathBuf>,
}

struct ReplicateOut {
    totals: SiteFunction,
    sample: IdentitySample,
    counts: EventCounts,
}

fn load_start(cfg: &ExperimentConfig, params: &ModelParams) -> Result<Option<PopulationField>, HarnessError> {
    let Some(path) = &cfg.sim.initial_snapshot else {
        return Ok(None);
    };
    let f = File::open(path).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
    let snap = read_snapshot(BufReader::new(f)).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
    if snap.params.grid_len != params.grid_len {
        return Err(HarnessError::Validation(format!(
            "snapshot has {} sites, config has {}",
            snap.params.grid_len, params.grid_len
        )));
    }
    Ok(Some(snap.field))
}

/// Runs the configured replicates and writes the mean profile and the
/// identity tables.
pub fn simulate(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<SimulateReport, HarnessError> {
    let params = cfg.params()?;
    let start = load_start(cfg, &params)?;
    let out_dir = &cfg.io.out_dir;
    let snap_dir = out_dir.join("snapshots");
    let refs = cfg.analysis.reference_sites.clone();
    let one = |k: usize| -> Result<ReplicateOut, HarnessError> {
        let mut sc = cfg.sim_config(k)?;
        // the growth scan already ran during config validation
        sc.strict_assumptions = false;
        if let Some(f) = &start {
            sc.initial_state = InitialState::Field(Box::new(f.clone()));
        }
        let out = run(&sc).map_err(runtime)?;
        if cfg.io.write_snapshots {
            let path = snap_dir.join(format!("replicate_{k:05}.snap"));
            let mut w = std::io::BufWriter::new(File::create(&path).map_err(runtime)?);
            write_snapshot(&mut w, cfg.sim.t_end, &params, &out.field).map_err(runtime)?;
        }
        Ok(ReplicateOut {
            totals: out.field.totals(),
            sample: identity_profile(&out.field, &refs).map_err(runtime)?,
            counts: out.counts,
        })
    };
    if cfg.io.write_snapshots {
        std::fs::create_dir_all(&snap_dir).map_err(runtime)?;
    }
    let reps = parallel_map(threads, cfg.analysis.replicates, one)?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let len = params.grid_len;
    let count = reps.len() as f64;
    let mut mean = vec![0.0; len];
    let mut counts = EventCounts::default();
    for r in &reps {
        for (m, v) in mean.iter_mut().zip(r.totals.iter()) {
            *m += v;
        }
        counts.candidates += r.counts.candidates;
        counts.accepted += r.counts.accepted;
        counts.evictions += r.counts.evictions;
    }
    for m in &mut mean {
        *m /= count;
    }
    let samples: Vec<IdentitySample> = reps.into_iter().map(|r| r.sample).collect();
    let table = replicate_stats(&samples).map_err(runtime)?;

    let h = header(cfg);
    let profile_path = out_dir.join(PROFILE_FILE);
    write_profile(&profile_path, &h, &mean)?;
    let mut per_rep = Vec::with_capacity(samples.len() * refs.len() * len);
    for (k, s) in samples.iter().enumerate() {
        for (i, &ref_site) in s.refs.iter().enumerate() {
            for (x, &identity) in s.values[i].iter().enumerate() {
                per_rep.push(ReplicateIdentityRow {
                    replicate: k,
                    ref_site,
                    x,
                    identity,
                });
            }
        }
    }
    let rep_path = out_dir.join(REPLICATE_IDENTITY_FILE);
    write_rows(&rep_path, &h, &per_rep)?;
    let id_path = out_dir.join(IDENTITY_FILE);
    write_rows(&id_path, &h, &identity_rows(&table))?;
    Ok(SimulateReport {
        table,
        mean_profile: SiteFunction(mean),
        counts,
        files: vec![profile_path, rep_path, id_path],
    })
}

#[derive(Debug, Clone)]
pub struct SteadyReport {
    pub steady: SteadyState,
    pub files: Vec<PathBuf>,
}

fn solve_steady(cfg: &ExperimentConfig) -> Result<SteadyState, HarnessError> {
    let params = cfg.params()?;
    let pde = cfg.pde_config()?;
    steady_state(&cfg.model.growth, &params, &pde).map_err(runtime)
}

fn write_steady(cfg: &ExperimentConfig, ss: &SteadyState) -> Result<PathBuf, HarnessError> {
    let path = cfg.io.out_dir.join(STEADY_FILE);
    let h = provenance(
        &cfg.hash(),
        &[
            ("converged", ss.converged.to_string()),
            ("residual", fmt_num(ss.residual)),
            ("steps", ss.steps.to_string()),
        ],
    );
    write_profile(&path, &h, &ss.profile)?;
    Ok(path)
}

/// Marches the reaction-diffusion equation to its stationary profile.
pub fn steady(cfg: &ExperimentConfig) -> Result<SteadyReport, HarnessError> {
    let ss = solve_steady(cfg)?;
    let path = write_steady(cfg, &ss)?;
    Ok(SteadyReport {
        steady: ss,
        files: vec![path],
    })
}

#[derive(Debug, Clone)]
pub struct PredictReport {
    pub steady: SteadyState,
    pub theta: ThetaMatrix,
    pub rows: Vec<PredictionRow>,
    pub files: Vec<PathBuf>,
}

/// Stationary profile, identity kernel and aligned predictions.
pub fn predict(cfg: &ExperimentConfig) -> Result<PredictReport, HarnessError> {
    let ss = solve_steady(cfg)?;
    let steady_path = write_steady(cfg, &ss)?;
    let (_, theta) = build_kernel(&ss.profile, &cfg.kernel_config()).map_err(runtime)?;
    let theta_path = cfg.io.out_dir.join(THETA_FILE);
    let theta_header = provenance(
        &cfg.hash(),
        &[
            ("profile_hash", profile_hash(&ss.profile)),
            ("mu", fmt_num(theta.mu)),
            ("t_max", theta.t_max.to_string()),
            ("rate_scale", fmt_num(theta.rate_scale)),
            ("steady_converged", ss.converged.to_string()),
        ],
    );
    write_theta(&theta_path, &theta_header, &theta)?;
    let (n, delta) = (cfg.predict.alignment_n, cfg.predict.delta);
    let mut rows = Vec::new();
    for &ref_site in &cfg.analysis.reference_sites {
        for x in 0..theta.dim() {
            let t = theta.get(ref_site, x);
            rows.push(PredictionRow {
                ref_site,
                x,
                theta: t,
                predicted: align_prediction(t, n, delta),
            });
        }
    }
    let pred_path = cfg.io.out_dir.join(PREDICTION_FILE);
    let h = provenance(
        &cfg.hash(),
        &[("alignment_n", fmt_num(n)), ("delta", fmt_num(delta)), ("steady_converged", ss.converged.to_string())],
    );
    write_rows(&pred_path, &h, &rows)?;
    Ok(PredictReport {
        steady: ss,
        theta,
        rows,
        files: vec![steady_path, theta_path, pred_path],
    })
}

/// Decorrelation between a reference and sites `near` and `far` away.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecorrelationRatio {
    pub ref_site: usize,
    pub near: usize,
    pub far: usize,
    /// `I(ref, far) / I(ref, near)` for the simulated mean.
    pub simulated: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<ComparisonRow>,
    /// Fraction of rows within the coverage window whose prediction lies in
    /// the simulated 5-95 band; `None` when bands are undefined.
    pub coverage: Option<f64>,
    pub covered: usize,
    pub considered: usize,
    pub best_n: Option<f64>,
    pub configured_n: f64,
    pub ratios: Vec<DecorrelationRatio>,
    pub files: Vec<PathBuf>,
}

/// Puts simulation and prediction on the kernel scale and scores coverage.
pub fn compare(
    cfg: &ExperimentConfig,
    sim_path: Option<&Path>,
    prediction_path: Option<&Path>,
) -> Result<CompareReport, HarnessError> {
    let dir = &cfg.io.out_dir;
    let sim_path = sim_path.map_or_else(|| dir.join(IDENTITY_FILE), Path::to_path_buf);
    let pred_path = prediction_path.map_or_else(|| dir.join(PREDICTION_FILE), Path::to_path_buf);
    let sim: Vec<IdentityCsvRow> = read_rows(&sim_path)?;
    let pred: Vec<PredictionRow> = read_rows(&pred_path)?;
    if sim.len() != pred.len() || sim.iter().zip(&pred).any(|(s, p)| s.ref_site != p.ref_site || s.x != p.x) {
        return Err(HarnessError::Validation(format!(
            "{} and {} cover different (reference, site) grids",
            sim_path.display(),
            pred_path.display()
        )));
    }
    if let Some(s) = sim.iter().find(|s| s.scale != "raw") {
        return Err(HarnessError::Validation(format!("simulated identity must be on the raw scale, got {}", s.scale)));
    }
    let c = cfg.predict.alignment_n * cfg.predict.delta;
    let window = cfg.analysis.coverage_window;
    let mut rows = Vec::with_capacity(sim.len());
    let (mut covered, mut considered, mut undefined) = (0usize, 0usize, false);
    for (s, p) in sim.iter().zip(&pred) {
        let band = s.n_replicates >= 2;
        let (lo, hi) = (s.p05 * c, s.p95 * c);
        let inside = p.theta >= lo && p.theta <= hi;
        if s.x.abs_diff(s.ref_site) <= window {
            if band {
                considered += 1;
                covered += inside as usize;
            } else {
                undefined = true;
            }
        }
        rows.push(ComparisonRow {
            ref_site: s.ref_site,
            x: s.x,
            sim_mean: s.mean * c,
            sim_median: s.median * c,
            sim_p05: lo,
            sim_p25: s.p25 * c,
            sim_p75: s.p75 * c,
            sim_p95: hi,
            prediction: p.theta,
            log10_sim_mean: log10_or_na(s.mean * c),
            log10_sim_median: log10_or_na(s.median * c),
            log10_prediction: log10_or_na(p.theta),
            covered: if band { (inside as u8).to_string() } else { "NA".into() },
        });
    }
    let coverage = (!undefined && considered > 0).then(|| covered as f64 / considered as f64);
    let best_n = best_alignment(
        &pred.iter().map(|p| p.theta).collect::<Vec<_>>(),
        &sim.iter().map(|s| s.mean * cfg.predict.delta).collect::<Vec<_>>(),
    );
    let lookup = |r: usize, x: usize| rows.iter().find(|row| row.ref_site == r && row.x == x);
    let mut ratios = Vec::new();
    for &r in &cfg.analysis.reference_sites {
        let (near, far) = (r + 1, r + 10);
        if let (Some(a), Some(b)) = (lookup(r, near), lookup(r, far)) {
            ratios.push(DecorrelationRatio {
                ref_site: r,
                near,
                far,
                simulated: b.sim_mean / a.sim_mean,
                predicted: b.prediction / a.prediction,
            });
        }
    }
    let out = dir.join(COMPARISON_FILE);
    let h = provenance(
        &cfg.hash(),
        &[("alignment_n", fmt_num(cfg.predict.alignment_n)), ("delta", fmt_num(cfg.predict.delta))],
    );
    write_rows(&out, &h, &rows)?;
    let mut summary = vec![
        KeyValue::new("coverage_window", window),
        KeyValue::new("coverage", coverage.map_or("NA".into(), fmt_num)),
        KeyValue::new("covered", covered),
        KeyValue::new("considered", considered),
        KeyValue::new("configured_n", fmt_num(cfg.predict.alignment_n)),
        KeyValue::new("best_n", best_n.map_or("NA".into(), fmt_num)),
    ];
    for r in &ratios {
        summary.push(KeyValue::new(format!("ratio_sim_{}_{}_{}", r.ref_site, r.far, r.near), fmt_num(r.simulated)));
        summary.push(KeyValue::new(format!("ratio_pred_{}_{}_{}", r.ref_site, r.far, r.near), fmt_num(r.predicted)));
    }
    let sum_path = dir.join(COMPARISON_SUMMARY_FILE);
    write_rows(&sum_path, &h, &summary)?;
    Ok(CompareReport {
        rows,
        coverage,
        covered,
        considered,
        best_n,
        configured_n: cfg.predict.alignment_n,
        ratios,
        files: vec![out, sum_path],
    })
}

#[derive(Debug, Clone)]
pub struct QvScaling {
    pub us: Vec<f64>,
    pub variances: Vec<f64>,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub convergence: ConvergenceStudy,
    pub refinement: RefinementStudy,
    /// Residual of the lineage generator against its ratio formula on a
    /// varying profile.
    pub generator_residual: f64,
    /// Same on a flat profile, where the generator is the second difference.
    pub flat_residual: f64,
    pub qv: QvReport,
    pub qv_scaling: QvScaling,
    pub files: Vec<PathBuf>,
}

/// Smooth bump vanishing within `margin` sites of either end.
pub fn bump(len: usize, margin: usize) -> SiteFunction {
    let (a, b) = (margin as f64, (len - 1 - margin) as f64);
    SiteFunction::from_fn(len, |i| {
        let x = i as f64;
        if x <= a || x >= b {
            0.0
        } else {
            (std::f64::consts::PI * (x - a) / (b - a)).sin().powi(2)
        }
    })
}

/// Bracket diagnostic with replicates spread over the worker pool.
pub fn run_qv(cfg: &QvConfig, threads: Option<usize>) -> Result<QvReport, HarnessError> {
    let reps = parallel_map(threads, cfg.replicates, |k| qv_replicate(cfg, k as u64))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    qv_summarize(cfg, &reps).map_err(runtime)
}

/// Empirical bracket variance for zero growth at several impacts `u`,
/// started from a non-flat profile so that `<n, phi>` actually moves.
pub fn qv_u_scaling(
    cfg: &ExperimentConfig,
    us: &[f64],
    threads: Option<usize>,
) -> Result<QvScaling, HarnessError> {
    let base = cfg.params()?;
    let len = base.grid_len;
    let start = SiteFunction::from_fn(len, |i| 4.0 + 2.0 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).sin());
    let phi = bump(len, 3 * base.radius);
    let mut variances = Vec::with_capacity(us.len());
    for &u in us {
        let p = ModelParams { u, ..base.clone() };
        let mut q = QvConfig::new(p, GrowthSpec::zero(len), start.clone(), phi.clone());
        q.replicates = cfg.analysis.qv_replicates;
        q.horizon = cfg.analysis.qv_horizon;
        q.seed = cfg.rng.seed;
        variances.push(run_qv(&q, threads)?.empirical_variance);
    }
    Ok(QvScaling {
        us: us.to_vec(),
        slope: loglog_slope(us, &variances),
        variances,
    })
}

/// Operator convergence, lineage-generator checks and the bracket diagnostic.
pub fn diagnostics(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<DiagnosticsReport, HarnessError> {
    let params = cfg.params()?;
    let wrap = ModelParams {
        boundary: Boundary::Wrap,
        ..params.clone()
    };
    let convergence = jump_operator_convergence(&wrap, &cfg.analysis.convergence_deltas, 1.0).map_err(runtime)?;

    let n = |x: f64| 2.0 + x.sin();
    let f = |x: f64| (2.0 * x).cos();
    let target = |x: f64| -4.0 * (2.0 * x).cos() + 2.0 * x.cos() / (2.0 + x.sin()) * (-2.0 * (2.0 * x).sin());
    let refinement = generator_refinement(n, f, target, (0.0, std::f64::consts::PI), &[0.1, 0.05, 0.025, 0.0125])
        .map_err(runtime)?;
    let len = params.grid_len;
    let fv = SiteFunction::from_fn(len, |i| (0.37 * i as f64).sin() + 0.01 * (i * i) as f64);
    let varying = SiteFunction::from_fn(len, |i| 2.0 + (0.1 * i as f64).sin());
    let generator_residual = drift_consistency_check(&varying, &fv).map_err(runtime)?.formula_residual;
    let flat_residual = drift_consistency_check(&SiteFunction::constant(len, 5.0), &fv)
        .map_err(runtime)?
        .formula_residual;

    let ss = solve_steady(cfg)?;
    let mut q = QvConfig::new(params.clone(), cfg.model.growth.clone(), ss.profile, bump(len, 3 * params.radius));
    q.replicates = cfg.analysis.qv_replicates;
    q.horizon = cfg.analysis.qv_horizon;
    q.seed = cfg.rng.seed;
    let qv = run_qv(&q, threads)?;
    let qv_scaling = qv_u_scaling(cfg, &[0.01, 0.02, 0.04], threads)?;

    let dir = &cfg.io.out_dir;
    let h = header(cfg);
    #[derive(serde::Serialize)]
    struct ConvRow {
        delta: f64,
        spacing: f64,
        radius_sites: usize,
        points: usize,
        max_error: f64,
    }
    let conv_rows: Vec<ConvRow> = convergence
        .rows
        .iter()
        .map(|r| ConvRow {
            delta: r.delta,
            spacing: r.spacing,
            radius_sites: r.radius_sites,
            points: r.points,
            max_error: r.max_error,
        })
        .collect();
    let conv_path = dir.join(CONVERGENCE_FILE);
    write_rows(&conv_path, &h, &conv_rows)?;
    #[derive(serde::Serialize)]
    struct RefRow {
        h: f64,
        max_error: f64,
    }
    let ref_rows: Vec<RefRow> = refinement
        .steps
        .iter()
        .zip(&refinement.errors)
        .map(|(&h, &max_error)| RefRow { h, max_error })
        .collect();
    let ref_path = dir.join(REFINEMENT_FILE);
    write_rows(&ref_path, &h, &ref_rows)?;
    let mut summary = vec![
        KeyValue::new("jump_convergence_slope", fmt_num(convergence.slope)),
        KeyValue::new("generator_refinement_slope", fmt_num(refinement.slope)),
        KeyValue::new("generator_formula_residual", fmt_num(generator_residual)),
        KeyValue::new("flat_generator_residual", fmt_num(flat_residual)),
        KeyValue::new("qv_empirical_variance", fmt_num(qv.empirical_variance)),
        KeyValue::new("qv_predicted_mean_path", fmt_num(qv.predicted)),
        KeyValue::new("qv_predicted_per_path", fmt_num(qv.predicted_per_path)),
        KeyValue::new("qv_ratio", fmt_num(qv.ratio)),
        KeyValue::new("qv_replicates", qv.replicates),
        KeyValue::new("qv_u_slope", fmt_num(qv_scaling.slope)),
    ];
    for (u, v) in qv_scaling.us.iter().zip(&qv_scaling.variances) {
        summary.push(KeyValue::new(format!("qv_variance_u_{u}"), fmt_num(*v)));
    }
    let diag_path = dir.join(DIAGNOSTICS_FILE);
    write_rows(&diag_path, &h, &summary)?;
    Ok(DiagnosticsReport {
        convergence,
        refinement,
        generator_residual,
        flat_residual,
        qv,
        qv_scaling,
        files: vec![conv_path, ref_path, diag_path],
    })
}
