//! Adjoint sensitivities of the mean-square loss.
//!
//! For `L = (1/N) sum (z(t_k) - z*_k)^2` the adjoint `u = dL/dz(t)` obeys
//! `u' = -u df/dz` between observations and jumps by `2 (z(t_k) - z*_k) / N`
//! at each observation. The parameter adjoints `v, w` obey
//! `v' = -u df/dtheta1`, `w' = -u df/dtheta2` with zero terminal values, so
//! `(v(0), w(0))` is the gradient. For the cosine model this is
//!
//! ```text
//! u' = u theta1 sin(phi)    v' = u z sin(phi)    w' = u sin(phi)    z' = cos(phi)
//! ```
//!
//! and `z` is replayed backward together with the adjoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::ExperimentRecord;
use crate::error::{Error, Result};
use crate::model::{forward_system, ModelParams};
use crate::ode::{integrate, SolverConfig, TimeSpan, Trajectory};

/// Adjoint variables together with the replayed hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    /// dL/dz(t)
    pub u: f64,
    /// dL/dtheta1 accumulated from t to the final observation
    pub v: f64,
    /// dL/dtheta2 accumulated from t to the final observation
    pub w: f64,
    pub z: f64,
}

impl AdjointState {
    pub const fn new(u: f64, v: f64, w: f64, z: f64) -> Self {
        Self { u, v, w, z }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.u, self.v, self.w, self.z]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self { u: x[0], v: x[1], w: x[2], z: x[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub dl_dtheta1: f64,
    pub dl_dtheta2: f64,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.dl_dtheta1.hypot(self.dl_dtheta2)
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        (self.dl_dtheta1 - other.dl_dtheta1).abs().max((self.dl_dtheta2 - other.dl_dtheta2).abs())
    }
}

/// Time derivative of the adjoint system.
pub fn rhs_backward(s: &AdjointState, p: &ModelParams) -> AdjointState {
    let (sin, cos) = p.phase(s.z).sin_cos();
    AdjointState { u: s.u * p.theta1 * sin, v: s.u * s.z * sin, w: s.u * sin, z: cos }
}

pub fn backward_system(p: ModelParams) -> impl Fn(f64, &[f64], &mut [f64]) + Sync {
    move |_t, x, out| {
        let d = rhs_backward(&AdjointState::from_slice(x), &p);
        out.copy_from_slice(&d.to_array());
    }
}

/// Piecewise backward solution between consecutive observation times.
///
/// Segment `k` runs from observation `k` down to observation `k - 1` (or to 0),
/// starting from the state right after the jump at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    segments: Vec<Trajectory>,
}

impl AdjointPath {
    pub fn segments(&self) -> &[Trajectory] {
        &self.segments
    }

    /// Adjoint state at `t`. At an observation time this is the value that
    /// already includes that observation's jump, i.e. `dL/dz(t_k^-)`.
    pub fn sample(&self, t: f64) -> Result<AdjointState> {
        // segments are stored latest-first; each covers (t_{k-1}, t_k]
        let seg = self.segments.iter().rev().find(|s| t <= s.times()[0]).ok_or_else(|| Error::OutOfRange {
            t,
            lo: 0.0,
            hi: self.segments[0].times()[0],
        })?;
        Ok(AdjointState::from_slice(&seg.sample(t)?))
    }

    pub fn initial_state(&self) -> AdjointState {
        AdjointState::from_slice(self.segments.last().expect("non-empty path").final_state())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordAdjoint {
    pub id: u64,
    /// Model predictions at the observation times.
    pub predictions: Vec<f64>,
    /// `u(0)`, the sensitivity of the loss to the initial position.
    pub a0: f64,
    pub gradient: Gradient,
    pub path: AdjointPath,
    /// Largest gap between the backward-replayed `z` and the forward solution
    /// at observation times and at `t = 0`.
    pub replay_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub gradient: Gradient,
    pub mse: f64,
    pub records: Vec<RecordAdjoint>,
}

/// Forward predictions at each observation time; the solve restarts at every
/// observation so predictions are nodes, not interpolants.
pub fn predict(record: &ExperimentRecord, p: &ModelParams, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let rhs = forward_system(*p);
    let mut t = 0.0;
    let mut z = record.z0;
    let mut out = Vec::with_capacity(record.observations.len());
    for obs in &record.observations {
        if obs.t > t {
            let traj = integrate(&rhs, &[z], TimeSpan::new(t, obs.t)?, cfg)?;
            z = traj.final_state()[0];
            t = obs.t;
        }
        out.push(z);
    }
    Ok(out)
}

/// Mean-square loss over every observation of every record, forward solves only.
pub fn mse_loss(records: &[ExperimentRecord], p: &ModelParams, cfg: &SolverConfig) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sq: Vec<f64> = records
        .par_iter()
        .map(|r| {
            let pred = predict(r, p, cfg)?;
            Ok(pred.iter().zip(&r.observations).map(|(z, o)| (z - o.z).powi(2)).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let n: usize = records.iter().map(|r| r.observations.len()).sum();
    Ok(sq.iter().sum::<f64>() / n as f64)
}

fn record_adjoint(
    record: &ExperimentRecord,
    p: &ModelParams,
    cfg: &SolverConfig,
    n_total: f64,
    jump_scale: f64,
) -> Result<(RecordAdjoint, f64)> {
    let predictions = predict(record, p, cfg)?;
    let rhs = backward_system(*p);
    let obs = &record.observations;

    let mut segments = Vec::with_capacity(obs.len());
    let mut state = [0.0, 0.0, 0.0, *predictions.last().expect("observations are non-empty")];
    let mut drift: f64 = 0.0;
    let mut sq = 0.0;
    for k in (0..obs.len()).rev() {
        let resid = predictions[k] - obs[k].z;
        sq += resid * resid;
        drift = drift.max((state[3] - predictions[k]).abs());
        state[0] += jump_scale * 2.0 * resid / n_total;
        let t_prev = if k == 0 { 0.0 } else { obs[k - 1].t };
        let traj = integrate(&rhs, &state, TimeSpan::new(obs[k].t, t_prev)?, cfg)?;
        state.copy_from_slice(traj.final_state());
        segments.push(traj);
    }
    drift = drift.max((state[3] - record.z0).abs());
    let rec = RecordAdjoint {
        id: record.id,
        predictions,
        a0: state[0],
        gradient: Gradient { dl_dtheta1: state[1], dl_dtheta2: state[2] },
        path: AdjointPath { segments },
        replay_drift: drift,
    };
    Ok((rec, sq))
}

/// Gradient of the mean-square loss by the adjoint method.
pub fn adjoint_gradient(records: &[ExperimentRecord], p: &ModelParams, cfg: &SolverConfig) -> Result<AdjointResult> {
    adjoint_gradient_scaled(records, p, cfg, 1.0)
}

/// As [`adjoint_gradient`] with every terminal jump of `u` multiplied by `jump_scale`.
pub fn adjoint_gradient_scaled(
    records: &[ExperimentRecord],
    p: &ModelParams,
    cfg: &SolverConfig,
    jump_scale: f64,
) -> Result<AdjointResult> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_total: usize = records.iter().map(|r| r.observations.len()).sum();
    if n_total == 0 {
        return Err(Error::EmptyDataset);
    }
    let per_record: Vec<(RecordAdjoint, f64)> =
        records.par_iter().map(|r| record_adjoint(r, p, cfg, n_total as f64, jump_scale)).collect::<Result<_>>()?;

    // fixed-order reduction
    let mut g1 = 0.0;
    let mut g2 = 0.0;
    let mut sq = 0.0;
    for (r, s) in &per_record {
        g1 += r.gradient.dl_dtheta1;
        g2 += r.gradient.dl_dtheta2;
        sq += s;
    }
    Ok(AdjointResult {
        gradient: Gradient { dl_dtheta1: g1, dl_dtheta2: g2 },
        mse: sq / n_total as f64,
        records: per_record.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Closed-form mean-square gradient at `theta1 = 0`, where `z(t) = z0 + t cos(theta2)`
/// and `dz/dtheta1 = -sin(theta2) (z0 t + cos(theta2) t^2 / 2)`.
pub fn linear_branch_gradient(records: &[ExperimentRecord], theta2: f64) -> Result<Gradient> {
    let n_total: usize = records.iter().map(|r| r.observations.len()).sum();
    if n_total == 0 {
        return Err(Error::EmptyDataset);
    }
    let (s, c) = theta2.sin_cos();
    let (mut g1, mut g2) = (0.0, 0.0);
    for r in records {
        for o in &r.observations {
            let resid = r.z0 + o.t * c - o.z;
            g1 += resid * -s * (r.z0 * o.t + c * o.t * o.t / 2.0);
            g2 += resid * -s * o.t;
        }
    }
    let k = 2.0 / n_total as f64;
    Ok(Gradient { dl_dtheta1: k * g1, dl_dtheta2: k * g2 })
}

/// Central-difference gradient of a scalar function of the parameters.
pub fn fd_gradient<F>(loss: F, p: &ModelParams, step: f64) -> Result<Gradient>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let probe = |q: ModelParams| -> Result<f64> {
        let l = loss(&q)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFiniteLoss { theta1: q.theta1, theta2: q.theta2 })
        }
    };
    let plus1 = probe(ModelParams::new(p.theta1 + step, p.theta2))?;
    let minus1 = probe(ModelParams::new(p.theta1 - step, p.theta2))?;
    let plus2 = probe(ModelParams::new(p.theta1, p.theta2 + step))?;
    let minus2 = probe(ModelParams::new(p.theta1, p.theta2 - step))?;
    Ok(Gradient { dl_dtheta1: (plus1 - minus1) / (2.0 * step), dl_dtheta2: (plus2 - minus2) / (2.0 * step) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Observation;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn record(id: u64, z0: f64, obs: &[(f64, f64)]) -> ExperimentRecord {
        ExperimentRecord { id, z0, observations: obs.iter().map(|&(t, z)| Observation { t, z }).collect() }
    }

    fn tight() -> SolverConfig {
        SolverConfig::adaptive(1e-10, 1e-10)
    }

    #[test]
    fn backward_rhs_values() {
        let d = rhs_backward(&AdjointState::new(1.0, 0.0, 0.0, FRAC_PI_2), &ModelParams::new(1.0, 0.0));
        assert!((d.u - 1.0).abs() < 1e-15 && (d.v - FRAC_PI_2).abs() < 1e-15);
        assert!((d.w - 1.0).abs() < 1e-15 && d.z.abs() < 1e-15);

        let p = ModelParams::new(0.7, 0.3);
        let d = rhs_backward(&AdjointState::new(0.0, 2.0, -1.0, 0.4), &p);
        assert_eq!((d.u, d.v, d.w), (0.0, 0.0, 0.0));
        assert_eq!(d.z, p.phase(0.4).cos());

        let d = rhs_backward(&AdjointState::new(2.0, 0.0, 0.0, FRAC_PI_4), &ModelParams::new(2.0, 0.0));
        assert!((d.u - 4.0).abs() < 1e-14);
        assert!((d.v - FRAC_PI_2).abs() < 1e-14);
        assert!((d.w - 2.0).abs() < 1e-14);
        assert!(d.z.abs() < 1e-15);
    }

    #[test]
    fn exact_observations_give_zero_gradient() {
        let p = ModelParams::new(1.2, 0.1);
        let cfg = tight();
        let mut recs = vec![record(0, -0.3, &[(0.5, 0.0), (1.0, 0.0)]), record(1, 0.2, &[(1.0, 0.0)])];
        for r in &mut recs {
            let pred = predict(r, &p, &cfg).unwrap();
            for (o, z) in r.observations.iter_mut().zip(pred) {
                o.z = z;
            }
        }
        let res = adjoint_gradient(&recs, &p, &cfg).unwrap();
        assert!(res.gradient.norm() < 1e-9);
        assert_eq!(res.mse, 0.0);
    }

    #[test]
    fn linear_branch_matches_closed_form() {
        let (z0, t, target, th2) = (0.3, 1.5, 1.0, 0.7);
        let p = ModelParams::new(0.0, th2);
        let res = adjoint_gradient(&[record(0, z0, &[(t, target)])], &p, &tight()).unwrap();
        let resid = z0 + t * th2.cos() - target;
        let dl_dth2 = -2.0 * resid * t * th2.sin();
        assert!((res.gradient.dl_dtheta2 - dl_dth2).abs() < 1e-8);
        // dz(t)/dtheta1 at theta1 = 0 is -sin(th2) * (z0 t + cos(th2) t^2 / 2)
        let dl_dth1 = 2.0 * resid * (-th2.sin()) * (z0 * t + th2.cos() * t * t / 2.0);
        assert!((res.gradient.dl_dtheta1 - dl_dth1).abs() < 1e-8);
        assert!((res.mse - resid * resid).abs() < 1e-12);
    }

    #[test]
    fn linear_branch_closed_form_agrees_with_adjoint() {
        let recs = vec![record(0, -0.4, &[(0.5, 0.1), (2.0, 0.9)]), record(1, 0.6, &[(1.0, -0.2)])];
        let closed = linear_branch_gradient(&recs, -0.3).unwrap();
        let adj = adjoint_gradient(&recs, &ModelParams::new(0.0, -0.3), &tight()).unwrap().gradient;
        assert!(closed.max_abs_diff(&adj) < 1e-8);
    }

    #[test]
    fn matches_finite_differences() {
        let p_star = ModelParams::new(1.2, 0.1);
        let recs: Vec<ExperimentRecord> = [-0.8, -0.2, 0.1, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &z0)| {
                let z = crate::model::exact_solution(z0, 1.0, &p_star).unwrap();
                record(i as u64, z0, &[(1.0, z)])
            })
            .collect();
        let p = ModelParams::new(1.0, 0.0);
        let cfg = tight();
        let adj = adjoint_gradient(&recs, &p, &cfg).unwrap().gradient;
        let fd = fd_gradient(|q| mse_loss(&recs, q, &cfg), &p, 1e-5).unwrap();
        assert!((adj.dl_dtheta1 - fd.dl_dtheta1).abs() <= 1e-4 * fd.dl_dtheta1.abs());
        assert!((adj.dl_dtheta2 - fd.dl_dtheta2).abs() <= 1e-4 * fd.dl_dtheta2.abs());
    }

    #[test]
    fn multiple_observations_match_finite_differences() {
        let recs =
            vec![record(0, -0.5, &[(0.3, -0.1), (0.9, 0.5), (1.6, 0.8)]), record(1, 0.1, &[(0.7, 0.4), (2.0, 1.0)])];
        let p = ModelParams::new(0.9, 0.2);
        let cfg = tight();
        let res = adjoint_gradient(&recs, &p, &cfg).unwrap();
        let fd = fd_gradient(|q| mse_loss(&recs, q, &cfg), &p, 1e-5).unwrap();
        assert!(res.gradient.max_abs_diff(&fd) <= 1e-6 * (1.0 + fd.norm()));
        assert!((res.mse - mse_loss(&recs, &p, &cfg).unwrap()).abs() < 1e-14);
        for r in &res.records {
            assert!(r.replay_drift < 1e-8);
        }
    }

    #[test]
    fn a0_is_sensitivity_to_initial_position() {
        let rec = record(0, 0.2, &[(0.8, 0.1), (1.5, 0.9)]);
        let p = ModelParams::new(1.1, -0.3);
        let cfg = tight();
        let res = adjoint_gradient(std::slice::from_ref(&rec), &p, &cfg).unwrap();
        let h = 1e-6;
        let shifted = |dz: f64| {
            let mut r = rec.clone();
            r.z0 += dz;
            mse_loss(&[r], &p, &cfg).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!((res.records[0].a0 - fd).abs() < 1e-7);
    }

    #[test]
    fn path_sampling_follows_jumps() {
        let rec = record(0, 0.0, &[(0.5, 1.0), (1.0, 2.0)]);
        let p = ModelParams::new(1.0, 0.0);
        let res = adjoint_gradient(&[rec], &p, &SolverConfig::fixed(0.01)).unwrap();
        let r = &res.records[0];
        let path = &r.path;
        assert_eq!(path.segments().len(), 2);
        // right after the final jump, u = 2 (z(1) - 2) / 2
        let at_end = path.sample(1.0).unwrap();
        assert!((at_end.u - (r.predictions[1] - 2.0)).abs() < 1e-12);
        assert_eq!((at_end.v, at_end.w), (0.0, 0.0));
        let at_zero = path.sample(0.0).unwrap();
        assert_eq!(at_zero, path.initial_state());
        assert!(path.sample(1.2).is_err());
    }

    #[test]
    fn gradient_is_linear_in_terminal_jumps() {
        let recs = vec![record(0, -0.4, &[(1.0, 0.3)]), record(1, 0.3, &[(0.5, 0.2), (1.0, 0.9)])];
        let p = ModelParams::new(1.3, 0.2);
        let cfg = tight();
        let base = adjoint_gradient(&recs, &p, &cfg).unwrap().gradient;
        for lambda in [-2.0, 0.5, 3.0] {
            let g = adjoint_gradient_scaled(&recs, &p, &cfg, lambda).unwrap().gradient;
            assert!((g.dl_dtheta1 - lambda * base.dl_dtheta1).abs() < 1e-10);
            assert!((g.dl_dtheta2 - lambda * base.dl_dtheta2).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_gradient_polynomial() {
        let g = fd_gradient(|q| Ok(q.theta1 * q.theta1 + 3.0 * q.theta2), &ModelParams::new(1.0, 2.0), 1e-6).unwrap();
        assert!((g.dl_dtheta1 - 2.0).abs() < 1e-8 && (g.dl_dtheta2 - 3.0).abs() < 1e-8);
        let g = fd_gradient(|_| Ok(4.2), &ModelParams::new(1.0, 2.0), 1e-6).unwrap();
        assert_eq!((g.dl_dtheta1, g.dl_dtheta2), (0.0, 0.0));
    }

    #[test]
    fn fd_gradient_rejects_non_finite() {
        let err = fd_gradient(|q| Ok(if q.theta1 > 1.0 { f64::NAN } else { 0.0 }), &ModelParams::new(1.0, 0.0), 1e-6)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }

    #[test]
    fn empty_records_rejected() {
        assert_eq!(adjoint_gradient(&[], &ModelParams::new(1.0, 0.0), &tight()).unwrap_err(), Error::EmptyDataset);
    }
}
