use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use symode_core::adjoint::linear_branch_gradient;
use symode_core::lie::{
    determining_residual_forward, determining_residuals_backward, epsilon_scaling_audit, forward_infinitesimals,
    phase_grid, ScalingRow,
};
use symode_core::training::{ComparisonReport, IterationRecord, StopReason, TrainingReport};
use symode_core::{
    adjoint_gradient, compare_runs, fd_gradient, generate_dataset, mse_loss, train, AdjointState, Dataset,
    GroupConstants, LossWeights, ModelParams, ResidualMode,
};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_NOT_CONVERGED, EXIT_NUMERICAL, EXIT_OK};
use crate::output::{load_dataset, OutDir};

pub const DATASET: &str = "dataset.json";
pub const REPORT: &str = "report.json";
pub const CONVERGENCE: &str = "convergence.csv";
pub const AUDIT_FORWARD: &str = "audit_forward.csv";
pub const AUDIT_BACKWARD: &str = "audit_backward.csv";
pub const AUDIT_SCALING: &str = "audit_scaling.csv";
pub const AUDIT_SUMMARY: &str = "audit_summary.json";
pub const GRAD_CHECK: &str = "grad_check.csv";
pub const COMPARE_TABLE: &str = "compare.csv";
pub const COMPARE_REPORT: &str = "compare_report.json";

/// Shared setup and teardown around a command body.
pub fn run<F>(name: &str, cfg: &RunConfig, out: &Path, body: F) -> Result<u8, CliError>
where
    F: FnOnce(&RunConfig, &OutDir) -> Result<u8, CliError>,
{
    let started = SystemTime::now();
    let clock = Instant::now();
    let dir = OutDir::create(out)?;
    dir.write_resolved_config(cfg)?;
    let code = body(cfg, &dir);
    dir.write_metadata(name, started, clock.elapsed())?;
    code
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.data.path.as_deref().ok_or_else(|| CliError::Usage("data.path is not set".into()))
}

pub fn simulate(cfg: &RunConfig, out: &OutDir) -> Result<u8, CliError> {
    let dataset = generate_dataset(&cfg.generation(cfg.seed, cfg.gen.noise_sigma))?;
    let path = out.write_json(DATASET, &dataset)?;
    println!(
        "simulate: n = {}, sigma = {}, seed = {} -> {}",
        dataset.experiments.len(),
        dataset.meta.noise_sigma,
        dataset.meta.seed,
        path.display()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ConvergenceRow {
    iter: usize,
    theta1: f64,
    theta2: f64,
    mse: f64,
    reg_f: f64,
    reg_g: f64,
    reg_h: f64,
    reg_i: f64,
    total: f64,
    grad_norm: f64,
    adjoint_fd_gap: Option<f64>,
}

impl From<&IterationRecord> for ConvergenceRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iter: r.iter,
            theta1: r.theta1,
            theta2: r.theta2,
            mse: r.loss.mse,
            reg_f: r.loss.reg_f,
            reg_g: r.loss.reg_g,
            reg_h: r.loss.reg_h,
            reg_i: r.loss.reg_i,
            total: r.loss.total,
            grad_norm: r.grad_norm,
            adjoint_fd_gap: r.adjoint_fd_gap,
        }
    }
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: &'a RunConfig,
    initial_params: ModelParams,
    param_error: Option<f64>,
    result: &'a TrainingReport,
}

fn exit_for(report: &TrainingReport) -> u8 {
    match report.stop_reason {
        StopReason::Converged => EXIT_OK,
        StopReason::MaxIters => EXIT_NOT_CONVERGED,
        StopReason::Diverged => EXIT_NUMERICAL,
    }
}

pub fn train_cmd(cfg: &RunConfig, out: &OutDir) -> Result<u8, CliError> {
    let dataset = load_dataset(dataset_path(cfg)?)?;
    let p0 = cfg.initial_params();
    let report = train(&dataset, p0, &cfg.training())?;
    let param_error = dataset.true_params().map(|t| report.final_params.max_abs_diff(&t));
    let rows: Vec<ConvergenceRow> = report.theta_path.iter().map(ConvergenceRow::from).collect();
    out.write_csv(CONVERGENCE, &rows)?;
    out.write_json(REPORT, &TrainOutput { config: cfg, initial_params: p0, param_error, result: &report })?;
    let last = report.last();
    println!(
        "train: {:?} after {} iterations, theta = ({}, {}), total = {:e}{}",
        report.stop_reason,
        last.iter,
        last.theta1,
        last.theta2,
        last.loss.total,
        param_error.map(|e| format!(", |theta - theta*| = {e:e}")).unwrap_or_default()
    );
    Ok(exit_for(&report))
}

#[derive(Serialize)]
struct ForwardRow {
    theta1: f64,
    theta2: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    t: f64,
    phi: f64,
    z: f64,
    residual: f64,
}

#[derive(Serialize)]
struct BackwardRow {
    theta1: f64,
    theta2: f64,
    k4: f64,
    phi: f64,
    u: f64,
    r1: f64,
    r2: f64,
    r3: f64,
    r4: f64,
    r4_closed_form: f64,
    r4_gap: f64,
}

#[derive(Serialize)]
struct ScalingCsvRow {
    theta1: f64,
    theta2: f64,
    epsilon: f64,
    max_residual: f64,
}

#[derive(Serialize)]
struct ScalingSummary {
    theta1: f64,
    theta2: f64,
    rows: Vec<ScalingRow>,
    slope: Option<f64>,
    pass: bool,
}

#[derive(Serialize)]
struct AuditSummary<'a> {
    config: &'a RunConfig,
    forward_max_abs: f64,
    forward_pass: bool,
    exact_subgroup_rows: usize,
    exact_subgroup_max_abs: f64,
    exact_subgroup_pass: bool,
    closed_form_rows: usize,
    closed_form_max_gap: f64,
    closed_form_pass: bool,
    scaling: Vec<ScalingSummary>,
    all_pass: bool,
}

/// `theta1 k4 (1 + sin^2 phi) / cos phi`, what the fourth backward determining
/// expression reduces to when `k4 != 0`.
fn r4_closed_form(theta1: f64, k4: f64, phi: f64) -> f64 {
    let (s, c) = phi.sin_cos();
    theta1 * k4 * (1.0 + s * s) / c
}

pub fn audit_symmetry(cfg: &RunConfig, out: &OutDir) -> Result<u8, CliError> {
    let a = &cfg.audit;
    if a.thetas.is_empty() || a.phi_values.is_empty() {
        return Err(CliError::Usage("audit.thetas and audit.phi_values must be non-empty".into()));
    }
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    let mut scaling_csv = Vec::new();
    let mut scaling = Vec::new();
    for &[theta1, theta2] in &a.thetas {
        let p = ModelParams::new(theta1, theta2);
        for &c1 in &a.c_values {
            for &c2 in &a.c_values {
                for &c3 in &a.c_values {
                    let gc = GroupConstants { c1, c2, c3, ..cfg.group.clone() };
                    for &t in &a.t_values {
                        for &phi in &a.phi_values {
                            let z = (phi - theta2) / theta1;
                            let x = forward_infinitesimals(t, z, &p, &gc)?;
                            let residual = determining_residual_forward(z, &p, &x);
                            forward.push(ForwardRow { theta1, theta2, c1, c2, c3, t, phi, z, residual });
                        }
                    }
                }
            }
        }
        for &k4 in &a.k4_values {
            let gc = GroupConstants { k4, ..cfg.group.clone() };
            for &phi in &a.phi_values {
                for &u in &a.u_values {
                    let z = (phi - theta2) / theta1;
                    let r = determining_residuals_backward(&AdjointState::new(u, a.v, a.w, z), &p, &gc)?;
                    let closed = r4_closed_form(theta1, k4, phi);
                    backward.push(BackwardRow {
                        theta1,
                        theta2,
                        k4,
                        phi,
                        u,
                        r1: r.r1,
                        r2: r.r2,
                        r3: r.r3,
                        r4: r.r4,
                        r4_closed_form: closed,
                        r4_gap: (r.r4 - closed).abs(),
                    });
                }
            }
        }
        let grid = phase_grid(&p, a.scaling_phi_max, a.scaling_points);
        let audit = epsilon_scaling_audit(&p, &cfg.group, &a.eps_list, &grid)?;
        for row in &audit.rows {
            scaling_csv.push(ScalingCsvRow { theta1, theta2, epsilon: row.epsilon, max_residual: row.max_residual });
        }
        let pass = audit.slope.is_some_and(|s| s >= a.slope_min && s <= a.slope_max);
        scaling.push(ScalingSummary { theta1, theta2, rows: audit.rows, slope: audit.slope, pass });
    }

    let forward_max_abs = forward.iter().fold(0.0, |m: f64, r| m.max(r.residual.abs()));
    let exact: Vec<&BackwardRow> = backward
        .iter()
        .filter(|r| GroupConstants { k4: r.k4, ..cfg.group.clone() }.is_exact_backward_subgroup())
        .collect();
    let exact_subgroup_max_abs =
        exact.iter().flat_map(|r| [r.r1, r.r2, r.r3, r.r4]).fold(0.0, |m: f64, x| m.max(x.abs()));
    let closed_form_max_gap = backward.iter().fold(0.0, |m: f64, r| m.max(r.r4_gap));

    let forward_pass = forward_max_abs <= a.forward_tol;
    let exact_subgroup_pass = exact_subgroup_max_abs <= a.backward_tol;
    let closed_form_pass = closed_form_max_gap <= a.closed_form_tol;
    let all_pass = forward_pass && exact_subgroup_pass && closed_form_pass && scaling.iter().all(|s| s.pass);

    out.write_csv(AUDIT_FORWARD, &forward)?;
    out.write_csv(AUDIT_BACKWARD, &backward)?;
    out.write_csv(AUDIT_SCALING, &scaling_csv)?;
    let summary = AuditSummary {
        config: cfg,
        forward_max_abs,
        forward_pass,
        exact_subgroup_rows: exact.len(),
        exact_subgroup_max_abs,
        exact_subgroup_pass,
        closed_form_rows: backward.len(),
        closed_form_max_gap,
        closed_form_pass,
        scaling,
        all_pass,
    };
    out.write_json(AUDIT_SUMMARY, &summary)?;
    println!(
        "audit-symmetry: forward max {:e}, exact backward max {:e}, r4 closed-form gap {:e}, slopes {:?}",
        summary.forward_max_abs,
        summary.exact_subgroup_max_abs,
        summary.closed_form_max_gap,
        summary.scaling.iter().map(|s| s.slope).collect::<Vec<_>>()
    );
    if all_pass {
        Ok(EXIT_OK)
    } else {
        Err(CliError::CheckFailed(format!("symmetry audit failed; see {}", out.path(AUDIT_SUMMARY).display())))
    }
}

#[derive(Serialize)]
struct GradCheckRow {
    label: String,
    theta1: f64,
    theta2: f64,
    adjoint_d1: f64,
    adjoint_d2: f64,
    fd_d1: f64,
    fd_d2: f64,
    analytic_d1: Option<f64>,
    analytic_d2: Option<f64>,
    gap: f64,
    tolerance: f64,
    pass: bool,
}

pub fn grad_check(cfg: &RunConfig, out: &OutDir) -> Result<u8, CliError> {
    let g = &cfg.gradcheck;
    let dataset = load_dataset(dataset_path(cfg)?)?;
    let records = &dataset.experiments;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points: Vec<(String, ModelParams)> = (0..g.points)
        .map(|i| {
            let p = ModelParams::new(
                rng.random_range(g.theta1_range[0]..=g.theta1_range[1]),
                rng.random_range(g.theta2_range[0]..=g.theta2_range[1]),
            );
            (format!("random_{i}"), p)
        })
        .collect();
    if g.include_optimum {
        if let Some(t) = dataset.true_params() {
            points.push(("optimum".into(), t));
        }
    }
    if g.include_linear {
        points.push(("linear".into(), ModelParams::new(0.0, g.linear_theta2)));
    }

    let mut rows = Vec::with_capacity(points.len());
    for (label, p) in points {
        let adj = adjoint_gradient(records, &p, &cfg.solver)?.gradient;
        let fd = fd_gradient(|q| mse_loss(records, q, &cfg.solver), &p, g.fd_step)?;
        let scale = fd.dl_dtheta1.abs().max(fd.dl_dtheta2.abs());
        let tolerance = g.rel_tol * scale + g.abs_tol;
        let mut gap = adj.max_abs_diff(&fd);
        let analytic = if p.theta1 == 0.0 { Some(linear_branch_gradient(records, p.theta2)?) } else { None };
        if let Some(an) = &analytic {
            gap = gap.max(adj.max_abs_diff(an));
        }
        rows.push(GradCheckRow {
            label,
            theta1: p.theta1,
            theta2: p.theta2,
            adjoint_d1: adj.dl_dtheta1,
            adjoint_d2: adj.dl_dtheta2,
            fd_d1: fd.dl_dtheta1,
            fd_d2: fd.dl_dtheta2,
            analytic_d1: analytic.map(|a| a.dl_dtheta1),
            analytic_d2: analytic.map(|a| a.dl_dtheta2),
            gap,
            tolerance,
            pass: gap <= tolerance,
        });
    }
    out.write_csv(GRAD_CHECK, &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!("grad-check: {} of {} points pass", rows.len() - failed, rows.len());
    if failed == 0 {
        Ok(EXIT_OK)
    } else {
        Err(CliError::CheckFailed(format!("{failed} gradient check(s) failed; see {}", out.path(GRAD_CHECK).display())))
    }
}

#[derive(Serialize)]
struct CompareRow {
    seed: u64,
    arm: &'static str,
    mode: ResidualMode,
    theta1: f64,
    theta2: f64,
    param_error: Option<f64>,
    mse: f64,
    reg_f: f64,
    reg_g: f64,
    reg_h: f64,
    reg_i: f64,
    total: f64,
    iterations: usize,
    converged: bool,
    stop_reason: StopReason,
}

impl CompareRow {
    fn new(seed: u64, arm: &'static str, mode: ResidualMode, r: &TrainingReport, err: Option<f64>) -> Self {
        let last = r.last();
        Self {
            seed,
            arm,
            mode,
            theta1: r.final_params.theta1,
            theta2: r.final_params.theta2,
            param_error: err,
            mse: last.loss.mse,
            reg_f: last.loss.reg_f,
            reg_g: last.loss.reg_g,
            reg_h: last.loss.reg_h,
            reg_i: last.loss.reg_i,
            total: last.loss.total,
            iterations: last.iter,
            converged: r.converged,
            stop_reason: r.stop_reason,
        }
    }
}

#[derive(Serialize)]
struct CompareRun {
    seed: u64,
    dataset: Option<PathBuf>,
    comparison: ComparisonReport,
}

#[derive(Serialize)]
struct CompareSummary {
    runs: usize,
    plain_mean_param_error: Option<f64>,
    regularized_mean_param_error: Option<f64>,
    plain_converged: usize,
    regularized_converged: usize,
}

#[derive(Serialize)]
struct CompareOutput<'a> {
    config: &'a RunConfig,
    summary: CompareSummary,
    runs: Vec<CompareRun>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn compare(cfg: &RunConfig, out: &OutDir) -> Result<u8, CliError> {
    let reg_cfg = cfg.training();
    let plain_cfg = symode_core::TrainConfig { weights: LossWeights::zero(), ..reg_cfg.clone() };
    let p0 = cfg.initial_params();

    let inputs: Vec<(u64, Option<PathBuf>, Dataset)> = if cfg.compare.runs == 0 {
        let path = dataset_path(cfg)?;
        let ds = load_dataset(path)?;
        vec![(ds.meta.seed, Some(path.to_owned()), ds)]
    } else {
        (1..=cfg.compare.runs)
            .map(|k| {
                let seed = cfg.seed + k;
                Ok((seed, None, generate_dataset(&cfg.generation(seed, cfg.compare.noise_sigma))?))
            })
            .collect::<Result<_, CliError>>()?
    };

    let mut runs = Vec::with_capacity(inputs.len());
    let mut rows = Vec::with_capacity(2 * inputs.len());
    for (seed, dataset, ds) in inputs {
        let comparison = compare_runs(&ds, p0, &plain_cfg, &reg_cfg)?;
        let d = &comparison.deltas;
        rows.push(CompareRow::new(seed, "plain", plain_cfg.mode, &comparison.plain, d.plain_param_error));
        rows.push(CompareRow::new(
            seed,
            "regularized",
            reg_cfg.mode,
            &comparison.regularized,
            d.regularized_param_error,
        ));
        runs.push(CompareRun { seed, dataset, comparison });
    }
    let summary = CompareSummary {
        runs: runs.len(),
        plain_mean_param_error: mean(runs.iter().map(|r| r.comparison.deltas.plain_param_error)),
        regularized_mean_param_error: mean(runs.iter().map(|r| r.comparison.deltas.regularized_param_error)),
        plain_converged: runs.iter().filter(|r| r.comparison.plain.converged).count(),
        regularized_converged: runs.iter().filter(|r| r.comparison.regularized.converged).count(),
    };
    out.write_csv(COMPARE_TABLE, &rows)?;
    println!(
        "compare: {} runs, mean |theta - theta*| plain {:?}, regularized {:?}",
        summary.runs, summary.plain_mean_param_error, summary.regularized_mean_param_error
    );
    let reports = runs.iter().flat_map(|r| [&r.comparison.plain, &r.comparison.regularized]);
    let code = reports.map(exit_for).max().unwrap_or(EXIT_OK);
    out.write_json(COMPARE_REPORT, &CompareOutput { config: cfg, summary, runs })?;
    Ok(code)
}
