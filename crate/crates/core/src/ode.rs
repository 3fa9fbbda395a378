//! Explicit integrators for `dx/dt = f(t, x)` of arbitrary dimension.
//!
//! Two schemes are provided:
//!
//! - [`integrate_fixed`]: classical four-stage Runge–Kutta on a uniform grid
//!   (the last step is shortened so the grid ends exactly on `t1`).
//! - [`integrate_adaptive`]: Dormand–Prince 5(4) with an elementary step-size
//!   controller.
//!
//! Both return a [`Trajectory`] that stores the right-hand side at every node,
//! so [`Trajectory::sample`] can interpolate with cubic Hermite polynomials.
//! A span with `t1 < t0` is integrated with negative steps; the same code path
//! handles forward and backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integration interval. The direction is the sign of `t1 - t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSpan {
    pub t0: f64,
    pub t1: f64,
}

impl TimeSpan {
    pub fn new(t0: f64, t1: f64) -> Result<Self> {
        if !t0.is_finite() || !t1.is_finite() {
            return Err(Error::Config(format!("time span [{t0}, {t1}] is not finite")));
        }
        if t0 == t1 {
            return Err(Error::Config(format!("time span [{t0}, {t1}] is empty")));
        }
        Ok(Self { t0, t1 })
    }

    pub fn length(&self) -> f64 {
        (self.t1 - self.t0).abs()
    }

    /// +1.0 for forward spans, -1.0 for backward ones.
    pub fn direction(&self) -> f64 {
        (self.t1 - self.t0).signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rk4")]
    Rk4Fixed,
    #[serde(rename = "rk45")]
    Rk45Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    /// Step length for the fixed-step scheme.
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Rk4Fixed, h: 1e-2, rtol: 1e-10, atol: 1e-10, max_steps: 1_000_000 }
    }
}

impl SolverConfig {
    pub fn fixed(h: f64) -> Self {
        Self { method: Method::Rk4Fixed, h, ..Self::default() }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self { method: Method::Rk45Adaptive, rtol, atol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::Config(format!("solver.h must be > 0, got {}", self.h)));
        }
        for (name, tol) in [("rtol", self.rtol), ("atol", self.atol)] {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(Error::Config(format!("solver.{name} must lie in (0, 1), got {tol}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("solver.max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Nodes of an integrated solution together with the right-hand side at each node.
///
/// Immutable once built; times are strictly monotone in one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn derivs(&self) -> &[Vec<f64>] {
        &self.derivs
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least two nodes")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least two nodes")
    }

    /// Cubic Hermite interpolation between nodes. Exact at node times.
    pub fn sample(&self, t: f64) -> Result<Vec<f64>> {
        let first = self.times[0];
        let last = self.final_time();
        let (lo, hi) = if first <= last { (first, last) } else { (last, first) };
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let forward = last > first;
        // index of the first node strictly past t in the integration direction
        let next = self.times.partition_point(|&ti| if forward { ti <= t } else { ti >= t });
        if next > 0 && self.times[next - 1] == t {
            return Ok(self.states[next - 1].clone());
        }
        let i = next.clamp(1, self.len() - 1) - 1;
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (xa, xb) = (&self.states[i], &self.states[i + 1]);
        let (da, db) = (&self.derivs[i], &self.derivs[i + 1]);
        Ok((0..xa.len()).map(|k| h00 * xa[k] + h10 * h * da[k] + h01 * xb[k] + h11 * h * db[k]).collect())
    }
}

fn check_finite(t: f64, v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { t, reason: format!("non-finite {what}") })
    }
}

fn eval<F>(rhs: &F, t: f64, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let mut out = vec![0.0; x.len()];
    rhs(t, x, &mut out);
    check_finite(t, &out, "right-hand side")?;
    Ok(out)
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

/// One classical Runge–Kutta step. `k1` is `rhs(t, x)` when already known.
fn rk4_step_with<F>(rhs: &F, t: f64, x: &[f64], h: f64, k1: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let k2 = eval(rhs, t + 0.5 * h, &axpy(x, 0.5 * h, k1))?;
    let k3 = eval(rhs, t + 0.5 * h, &axpy(x, 0.5 * h, &k2))?;
    let k4 = eval(rhs, t + h, &axpy(x, h, &k3))?;
    let next: Vec<f64> = (0..x.len()).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    check_finite(t + h, &next, "state")?;
    Ok(next)
}

pub fn rk4_step<F>(rhs: &F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if h == 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("rk4 step must be finite and non-zero, got {h}")));
    }
    let k1 = eval(rhs, t, x)?;
    rk4_step_with(rhs, t, x, h, &k1)
}

/// Fixed-step RK4 over `span`. The final step is shortened to land on `span.t1`.
pub fn integrate_fixed<F>(rhs: &F, x0: &[f64], span: TimeSpan, h: f64, max_steps: usize) -> Result<Trajectory>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Config(format!("step must be > 0, got {h}")));
    }
    check_finite(span.t0, x0, "initial state")?;
    let ratio = span.length() / h;
    // tolerate representation error in length/h so [0, 1] with h = 0.1 takes 10 steps
    let n = ((ratio - 1e-9 * ratio.max(1.0)).ceil() as usize).max(1);
    if n > max_steps {
        return Err(Error::MaxSteps { max_steps, t: span.t0 });
    }
    let dir = span.direction();

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    let mut t = span.t0;
    let mut x = x0.to_vec();
    let mut d = eval(rhs, t, &x)?;
    for i in 1..=n {
        let t_next = if i == n { span.t1 } else { span.t0 + dir * h * i as f64 };
        let next = rk4_step_with(rhs, t, &x, t_next - t, &d)?;
        times.push(t);
        states.push(std::mem::replace(&mut x, next));
        derivs.push(std::mem::take(&mut d));
        t = t_next;
        d = eval(rhs, t, &x)?;
    }
    times.push(t);
    states.push(x);
    derivs.push(d);
    Ok(Trajectory { times, states, derivs })
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order weights minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn weighted_max_norm(v: &[f64], x: &[f64], y: &[f64], rtol: f64, atol: f64) -> f64 {
    v.iter()
        .zip(x.iter().zip(y))
        .map(|(vi, (xi, yi))| vi.abs() / (atol + rtol * xi.abs().max(yi.abs())))
        .fold(0.0, f64::max)
}

/// Starting step from the usual two-probe heuristic (Hairer, Nørsett & Wanner).
fn initial_step<F>(rhs: &F, t0: f64, x0: &[f64], f0: &[f64], dir: f64, cfg: &SolverConfig, span_len: f64) -> Result<f64>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let scale = |v: &[f64]| weighted_max_norm(v, x0, x0, cfg.rtol, cfg.atol);
    let d0 = scale(x0);
    let d1 = scale(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span_len);
    let x1 = axpy(x0, dir * h0, f0);
    let f1 = eval(rhs, t0 + dir * h0, &x1)?;
    let df: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scale(&df) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(1.0 / 5.0) };
    Ok((100.0 * h0).min(h1).min(span_len))
}

/// Dormand–Prince 5(4). A step is accepted when the embedded error estimate
/// satisfies `|err_i| <= atol + rtol * max(|x_i|, |x_new_i|)` in every component.
pub fn integrate_adaptive<F>(rhs: &F, x0: &[f64], span: TimeSpan, cfg: &SolverConfig) -> Result<Trajectory>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    check_finite(span.t0, x0, "initial state")?;
    let dir = span.direction();
    let len = span.length();
    let h_min = 1e-14 * len;

    let mut t = span.t0;
    let mut x = x0.to_vec();
    let mut k1 = eval(rhs, t, &x)?;
    let mut h = initial_step(rhs, t, &x, &k1, dir, cfg, len)?;

    let mut times = vec![t];
    let mut states = vec![x.clone()];
    let mut derivs = vec![k1.clone()];
    let mut attempts = 0usize;

    loop {
        let remaining = (span.t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if attempts >= cfg.max_steps {
            return Err(Error::MaxSteps { max_steps: cfg.max_steps, t });
        }
        attempts += 1;
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        if step < h_min {
            return Err(Error::StepUnderflow { t, h: step });
        }
        let hs = dir * step;

        let n = x.len();
        let stage = |coef: &[(f64, &[f64])]| -> Vec<f64> {
            (0..n).map(|i| x[i] + hs * coef.iter().map(|(a, k)| a * k[i]).sum::<f64>()).collect()
        };
        let k2 = eval(rhs, t + C2 * hs, &stage(&[(A21, &k1)]))?;
        let k3 = eval(rhs, t + C3 * hs, &stage(&[(A31, &k1), (A32, &k2)]))?;
        let k4 = eval(rhs, t + C4 * hs, &stage(&[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
        let k5 = eval(rhs, t + C5 * hs, &stage(&[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
        let k6 = eval(rhs, t + hs, &stage(&[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]))?;
        let x_new = stage(&[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        check_finite(t + hs, &x_new, "state")?;
        let t_new = if last { span.t1 } else { t + hs };
        let k7 = eval(rhs, t_new, &x_new)?;
        let err: Vec<f64> = (0..n)
            .map(|i| hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]))
            .collect();
        let err_norm = weighted_max_norm(&err, &x, &x_new, cfg.rtol, cfg.atol);

        if err_norm <= 1.0 {
            t = t_new;
            x = x_new;
            k1 = k7;
            times.push(t);
            states.push(x.clone());
            derivs.push(k1.clone());
            let factor =
                if err_norm == 0.0 { MAX_FACTOR } else { (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
            h = step * factor;
        } else {
            h = step * (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    Ok(Trajectory { times, states, derivs })
}

/// Dispatch on `cfg.method`.
pub fn integrate<F>(rhs: &F, x0: &[f64], span: TimeSpan, cfg: &SolverConfig) -> Result<Trajectory>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    match cfg.method {
        Method::Rk4Fixed => integrate_fixed(rhs, x0, span, cfg.h, cfg.max_steps),
        Method::Rk45Adaptive => integrate_adaptive(rhs, x0, span, cfg),
    }
}
