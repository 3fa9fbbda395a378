//! Symmetry-regularized loss and parameter identification.
//!
//! ```text
//! total = mse + a1 sum F^2 + a2 sum G^2 + a3 sum H^2 + a4 sum I^2
//! ```
//!
//! `F` and `G` are evaluated at the predicted state at every observation time,
//! `H` and `I` at the adjoint-path state at the same times. The backward
//! residuals are divided by `max(1, |u|)` before squaring. A point outside a
//! residual's domain is skipped and counted.
//!
//! Training takes central differences of `total` over the two parameters; every
//! tenth iterate the adjoint gradient of the MSE part is compared against the
//! finite-difference MSE gradient from the same probes.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_gradient, predict, Gradient};
use crate::conservation::{residual_f, residual_g, residual_h, residual_i, ResidualMode};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::lie::GroupConstants;
use crate::model::ModelParams;
use crate::ode::SolverConfig;

/// How often (in iterations) the adjoint cross-check runs.
pub const ADJOINT_CHECK_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { a1: 1e-2, a2: 1e-2, a3: 1e-2, a4: 1e-2 }
    }
}

impl LossWeights {
    pub const fn zero() -> Self {
        Self { a1: 0.0, a2: 0.0, a3: 0.0, a4: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.a1 == 0.0 && self.a2 == 0.0 && self.a3 == 0.0 && self.a4 == 0.0
    }

    fn validate(&self) -> Result<()> {
        for (name, a) in [("a1", self.a1), ("a2", self.a2), ("a3", self.a3), ("a4", self.a4)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub reg_f: f64,
    pub reg_g: f64,
    pub reg_h: f64,
    pub reg_i: f64,
    pub total: f64,
    /// Evaluation points dropped because a residual was outside its domain.
    pub skipped: usize,
}

impl LossBreakdown {
    /// `|total - (mse + sum a_k reg_k)|`.
    pub fn additivity_gap(&self, w: &LossWeights) -> f64 {
        (self.total - (self.mse + w.a1 * self.reg_f + w.a2 * self.reg_g + w.a3 * self.reg_h + w.a4 * self.reg_i)).abs()
    }

    fn is_finite(&self) -> bool {
        [self.mse, self.reg_f, self.reg_g, self.reg_h, self.reg_i, self.total].iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    pub weights: LossWeights,
    pub gc: GroupConstants,
    pub mode: ResidualMode,
    /// Recorded for provenance; training itself draws no random numbers.
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 5e-2,
            max_iters: 500,
            grad_tol: 1e-7,
            fd_step: 1e-6,
            weights: LossWeights::default(),
            gc: GroupConstants::default(),
            mode: ResidualMode::Chain,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn plain() -> Self {
        Self { weights: LossWeights::zero(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("train.lr must lie in (0, 1], got {}", self.learning_rate)));
        }
        if !(self.fd_step >= 1e-8 && self.fd_step <= 1e-3) {
            return Err(Error::Config(format!("train.fd_step must lie in [1e-8, 1e-3], got {}", self.fd_step)));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 {
            return Err(Error::Config(format!("train.grad_tol must be >= 0, got {}", self.grad_tol)));
        }
        self.weights.validate()?;
        self.gc.validate()?;
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Max-abs gap between the adjoint and finite-difference MSE gradients,
    /// present on every tenth iterate.
    pub adjoint_fd_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub theta_path: Vec<IterationRecord>,
    pub final_params: ModelParams,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Seconds; excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrainingReport {
    pub fn last(&self) -> &IterationRecord {
        self.theta_path.last().expect("theta path is never empty")
    }

    pub fn iterations(&self) -> usize {
        self.last().iter
    }
}

/// Per-observation contributions of one record.
#[derive(Default)]
struct RecordTerms {
    sq_err: f64,
    f: f64,
    g: f64,
    h: f64,
    i: f64,
    // admissible point counts per regularizer
    n: [usize; 4],
    skipped: usize,
}

fn accumulate(slot: &mut f64, count: &mut usize, skipped: &mut usize, r: Result<f64>, scale: f64) -> Result<()> {
    match r {
        Ok(x) => {
            *slot += (x / scale).powi(2);
            *count += 1;
            Ok(())
        }
        Err(Error::Domain(_) | Error::Singularity { .. }) => {
            *skipped += 1;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

pub fn loss_total(dataset: &Dataset, p: &ModelParams, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let records = &dataset.experiments;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let w = &cfg.weights;
    let n_total = dataset.observation_count();
    let need_adjoint = w.a3 > 0.0 || w.a4 > 0.0 || (w.a2 > 0.0 && cfg.gc.k4 != 0.0);

    let terms: Vec<RecordTerms> = if need_adjoint {
        let adj = adjoint_gradient(records, p, &cfg.solver)?;
        adj.records
            .par_iter()
            .zip(records.par_iter())
            .map(|(ra, rec)| {
                let mut t = RecordTerms::default();
                for (k, obs) in rec.observations.iter().enumerate() {
                    let z = ra.predictions[k];
                    t.sq_err += (z - obs.z).powi(2);
                    let s = ra.path.sample(obs.t)?;
                    let norm = s.u.abs().max(1.0);
                    point_terms(&mut t, z, Some((s.u, s.v, s.w, norm)), p, cfg)?;
                }
                Ok(t)
            })
            .collect::<Result<_>>()?
    } else {
        records
            .par_iter()
            .map(|rec| {
                let pred = predict(rec, p, &cfg.solver)?;
                let mut t = RecordTerms::default();
                for (z, obs) in pred.iter().zip(&rec.observations) {
                    t.sq_err += (z - obs.z).powi(2);
                    point_terms(&mut t, *z, None, p, cfg)?;
                }
                Ok(t)
            })
            .collect::<Result<_>>()?
    };

    // fixed-order reduction
    let mut sum = RecordTerms::default();
    for t in &terms {
        sum.sq_err += t.sq_err;
        sum.f += t.f;
        sum.g += t.g;
        sum.h += t.h;
        sum.i += t.i;
        for k in 0..4 {
            sum.n[k] += t.n[k];
        }
        sum.skipped += t.skipped;
    }
    for (k, (name, a)) in [("F", w.a1), ("G", w.a2), ("H", w.a3), ("I", w.a4)].into_iter().enumerate() {
        if a > 0.0 && sum.n[k] == 0 {
            return Err(Error::DegenerateRegularizer(name));
        }
    }
    let mse = sum.sq_err / n_total as f64;
    let total = mse + w.a1 * sum.f + w.a2 * sum.g + w.a3 * sum.h + w.a4 * sum.i;
    Ok(LossBreakdown { mse, reg_f: sum.f, reg_g: sum.g, reg_h: sum.h, reg_i: sum.i, total, skipped: sum.skipped })
}

/// Adds the squared residuals at one observation. `adj` carries `(u, v, w, max(1, |u|))`.
fn point_terms(
    t: &mut RecordTerms,
    z: f64,
    adj: Option<(f64, f64, f64, f64)>,
    p: &ModelParams,
    cfg: &TrainConfig,
) -> Result<()> {
    let w = &cfg.weights;
    let (gc, mode) = (&cfg.gc, cfg.mode);
    let RecordTerms { f, g, h, i, n, skipped, .. } = t;
    if w.a1 > 0.0 {
        accumulate(f, &mut n[0], skipped, residual_f(z, p, gc, mode), 1.0)?;
    }
    if w.a2 > 0.0 {
        let (u, norm) = adj.map_or((None, 1.0), |(u, _, _, norm)| (Some(u), norm));
        accumulate(g, &mut n[1], skipped, residual_g(z, u, p, gc, mode), norm)?;
    }
    if let Some((u, v, wv, norm)) = adj {
        if w.a3 > 0.0 {
            accumulate(h, &mut n[2], skipped, residual_h(z, u, v, p, gc, mode), norm)?;
        }
        if w.a4 > 0.0 {
            accumulate(i, &mut n[3], skipped, residual_i(z, u, wv, p, gc, mode), norm)?;
        }
    }
    Ok(())
}

struct Adam {
    m: [f64; 2],
    v: [f64; 2],
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self { m: [0.0; 2], v: [0.0; 2], t: 0 }
    }

    fn step(&mut self, g: [f64; 2], lr: f64) -> [f64; 2] {
        self.t += 1;
        let mut delta = [0.0; 2];
        for k in 0..2 {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
            let m_hat = self.m[k] / (1.0 - Self::BETA1.powi(self.t));
            let v_hat = self.v[k] / (1.0 - Self::BETA2.powi(self.t));
            delta[k] = -lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
        delta
    }
}

/// Loss at `p` and central-difference gradients of `total` and of `mse`.
fn evaluate(dataset: &Dataset, p: &ModelParams, cfg: &TrainConfig) -> Result<(LossBreakdown, Gradient, Gradient)> {
    let h = cfg.fd_step;
    let probes = [
        *p,
        ModelParams::new(p.theta1 + h, p.theta2),
        ModelParams::new(p.theta1 - h, p.theta2),
        ModelParams::new(p.theta1, p.theta2 + h),
        ModelParams::new(p.theta1, p.theta2 - h),
    ];
    let mut losses = Vec::with_capacity(5);
    for q in &probes {
        let l = loss_total(dataset, q, cfg)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { theta1: q.theta1, theta2: q.theta2 });
        }
        losses.push(l);
    }
    let d = |a: f64, b: f64| (a - b) / (2.0 * h);
    let total =
        Gradient { dl_dtheta1: d(losses[1].total, losses[2].total), dl_dtheta2: d(losses[3].total, losses[4].total) };
    let mse = Gradient { dl_dtheta1: d(losses[1].mse, losses[2].mse), dl_dtheta2: d(losses[3].mse, losses[4].mse) };
    Ok((losses[0], total, mse))
}

pub fn train(dataset: &Dataset, p0: ModelParams, cfg: &TrainConfig) -> Result<TrainingReport> {
    cfg.validate()?;
    dataset.validate()?;
    if !p0.is_finite() {
        return Err(Error::Config("initial parameters must be finite".into()));
    }
    let start = Instant::now();
    let mut p = p0;
    let mut path = Vec::new();
    let mut adam = Adam::new();
    let mut stop = StopReason::MaxIters;

    for iter in 0..=cfg.max_iters {
        let (loss, grad, mse_grad) = match evaluate(dataset, &p, cfg) {
            Ok(x) => x,
            Err(Error::NonFiniteLoss { .. }) => {
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let adjoint_fd_gap = if iter % ADJOINT_CHECK_EVERY == 0 {
            let adj = adjoint_gradient(&dataset.experiments, &p, &cfg.solver)?;
            Some(adj.gradient.max_abs_diff(&mse_grad))
        } else {
            None
        };
        let grad_norm = grad.norm();
        path.push(IterationRecord { iter, theta1: p.theta1, theta2: p.theta2, loss, grad_norm, adjoint_fd_gap });
        if grad_norm <= cfg.grad_tol {
            stop = StopReason::Converged;
            break;
        }
        if iter == cfg.max_iters {
            break;
        }
        let g = [grad.dl_dtheta1, grad.dl_dtheta2];
        let delta = match cfg.optimizer {
            Optimizer::Gd => [-cfg.learning_rate * g[0], -cfg.learning_rate * g[1]],
            Optimizer::Adam => adam.step(g, cfg.learning_rate),
        };
        let next = ModelParams::new(p.theta1 + delta[0], p.theta2 + delta[1]);
        if !next.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        p = next;
    }

    if path.is_empty() {
        return Err(Error::NonFiniteLoss { theta1: p0.theta1, theta2: p0.theta2 });
    }
    let last = path.last().expect("non-empty");
    Ok(TrainingReport {
        final_params: ModelParams::new(last.theta1, last.theta2),
        converged: stop == StopReason::Converged,
        stop_reason: stop,
        theta_path: path,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDeltas {
    /// `|theta - theta*|_inf` per arm, when the dataset carries true parameters.
    pub plain_param_error: Option<f64>,
    pub regularized_param_error: Option<f64>,
    /// regularized minus plain
    pub final_mse_delta: f64,
    pub final_total_delta: f64,
    pub iteration_delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub plain: TrainingReport,
    pub regularized: TrainingReport,
    pub regularized_mode: ResidualMode,
    pub deltas: ComparisonDeltas,
}

/// Trains both arms from the same start. The configs may differ only in
/// weights, group constants and residual mode.
pub fn compare_runs(
    dataset: &Dataset,
    p0: ModelParams,
    cfg_plain: &TrainConfig,
    cfg_reg: &TrainConfig,
) -> Result<ComparisonReport> {
    let strip = |c: &TrainConfig| TrainConfig {
        weights: LossWeights::zero(),
        gc: GroupConstants::zero(),
        mode: ResidualMode::Chain,
        ..c.clone()
    };
    if strip(cfg_plain) != strip(cfg_reg) {
        return Err(Error::Config("compared configs may differ only in weights, group constants and mode".into()));
    }
    let plain = train(dataset, p0, cfg_plain)?;
    let regularized = train(dataset, p0, cfg_reg)?;
    let truth = dataset.true_params();
    let deltas = ComparisonDeltas {
        plain_param_error: truth.map(|t| plain.final_params.max_abs_diff(&t)),
        regularized_param_error: truth.map(|t| regularized.final_params.max_abs_diff(&t)),
        final_mse_delta: regularized.last().loss.mse - plain.last().loss.mse,
        final_total_delta: regularized.last().loss.total - plain.last().loss.total,
        iteration_delta: regularized.iterations() as i64 - plain.iterations() as i64,
    };
    Ok(ComparisonReport { plain, regularized, regularized_mode: cfg_reg.mode, deltas })
}
