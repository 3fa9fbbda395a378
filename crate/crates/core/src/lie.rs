//! Point symmetries of the forward system `z' = cos(phi)` and of the adjoint
//! system, evaluated from closed-form infinitesimals.
//!
//! Forward generator (`phi = theta1 z + theta2`, `A = atanh(sin phi)`):
//!
//! ```text
//! T = c1 t + c2
//! Z = (c1 / theta1) cos(phi) A + c3 cos(phi)
//! ```
//!
//! Backward generator, acting on `(t, z, u, v, w)`:
//!
//! ```text
//! T = k2                      Z = k4 tan(phi)
//! U = k3 u + k4 theta1 u ln u
//! V = (k3 + k4 theta1 ln u) v + g(u)
//! W = (k3 + k4 theta1 ln u) w + h(u)
//! ```
//!
//! The determining residuals apply the first prolongation
//! `X_[t] = D_t(X) - x' D_t(T)` with every partial derivative kept, and
//! substitute `x'` from the ODEs. A term that is singular somewhere (`1/theta1`,
//! `atanh`, `tan`, `ln u`) is only evaluated, and its domain only checked, when
//! the constant multiplying it is non-zero.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointState;
use crate::conservation::{residual_f, ResidualMode};
use crate::error::{Error, Result};
use crate::model::{ModelParams, THETA1_MIN};

const SIN_LIMIT: f64 = 1.0 - 1e-9;
const COS_LIMIT: f64 = 1e-9;
const U_MIN: f64 = 1e-12;

/// Polynomial in `u`, lowest degree first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Self(vec![c])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.0.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, &c)| acc * x + k as f64 * c)
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().skip(1).all(|&c| c == 0.0)
    }
}

/// Group parameter and integration constants of both generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConstants {
    pub epsilon: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub g: Polynomial,
    pub h: Polynomial,
}

impl Default for GroupConstants {
    /// Perturbative regime with the backward constants on the exact subgroup (`k4 = 0`).
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            c1: 1.0,
            c2: 0.0,
            c3: 0.5,
            k2: 0.0,
            k3: 1.0,
            k4: 0.0,
            g: Polynomial::constant(0.0),
            h: Polynomial::constant(0.0),
        }
    }
}

impl GroupConstants {
    /// All constants zero: the identity transformation.
    pub fn zero() -> Self {
        Self {
            epsilon: 0.0,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            k2: 0.0,
            k3: 0.0,
            k4: 0.0,
            g: Polynomial::constant(0.0),
            h: Polynomial::constant(0.0),
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [self.epsilon, self.c1, self.c2, self.c3, self.k2, self.k3, self.k4];
        if scalars.iter().chain(&self.g.0).chain(&self.h.0).any(|x| !x.is_finite()) {
            return Err(Error::Config("group constants must be finite".into()));
        }
        Ok(())
    }

    /// True when the backward constants lie on the subgroup that satisfies every
    /// determining equation under the full prolongation.
    pub fn is_exact_backward_subgroup(&self) -> bool {
        self.k4 == 0.0 && self.g.is_constant() && self.h.is_constant()
    }
}

/// `Canonical` applies the first-order exponential map to every variable. `Literal` leaves
/// `epsilon` off the `c3` term of `z_bar` and the `k4 theta1 ln u` term of `u_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    Canonical,
    Literal,
}

/// Coefficients of the forward generator `T d/dt + Z d/dz` and their partials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardInfinitesimals {
    pub t: f64,
    pub z: f64,
    pub t_t: f64,
    pub t_z: f64,
    pub z_t: f64,
    pub z_z: f64,
}

impl ForwardInfinitesimals {
    /// Builds a candidate from arbitrary coefficient functions; partials by
    /// central differences with the given step.
    pub fn from_fns<T, Z>(t: f64, z: f64, tf: T, zf: Z, step: f64) -> Self
    where
        T: Fn(f64, f64) -> f64,
        Z: Fn(f64, f64) -> f64,
    {
        let d = |f: &dyn Fn(f64, f64) -> f64, dt: f64, dz: f64| (f(t + dt, z + dz) - f(t - dt, z - dz)) / (2.0 * step);
        Self {
            t: tf(t, z),
            z: zf(t, z),
            t_t: d(&tf, step, 0.0),
            t_z: d(&tf, 0.0, step),
            z_t: d(&zf, step, 0.0),
            z_z: d(&zf, 0.0, step),
        }
    }
}

/// The two pieces of the forward `Z` (the `c1` part and the `c3` part) with their z-partials.
struct ForwardParts {
    c1_part: f64,
    c1_part_z: f64,
    c3_part: f64,
    c3_part_z: f64,
}

fn forward_parts(z: f64, p: &ModelParams, gc: &GroupConstants) -> Result<ForwardParts> {
    let phi = p.phase(z);
    let (s, c) = phi.sin_cos();
    let (c1_part, c1_part_z) = if gc.c1 != 0.0 {
        if p.theta1.abs() < THETA1_MIN {
            return Err(Error::Domain(format!("forward symmetry needs |theta1| >= {THETA1_MIN}, got {}", p.theta1)));
        }
        if s.abs() > SIN_LIMIT {
            return Err(Error::Singularity { what: "atanh(sin phi)", phi });
        }
        let a = s.atanh();
        (gc.c1 / p.theta1 * c * a, gc.c1 * (1.0 - s * a))
    } else {
        (0.0, 0.0)
    };
    Ok(ForwardParts { c1_part, c1_part_z, c3_part: gc.c3 * c, c3_part_z: -gc.c3 * p.theta1 * s })
}

pub fn forward_infinitesimals(t: f64, z: f64, p: &ModelParams, gc: &GroupConstants) -> Result<ForwardInfinitesimals> {
    let parts = forward_parts(z, p, gc)?;
    Ok(ForwardInfinitesimals {
        t: gc.c1 * t + gc.c2,
        z: parts.c1_part + parts.c3_part,
        t_t: gc.c1,
        t_z: 0.0,
        z_t: 0.0,
        z_z: parts.c1_part_z + parts.c3_part_z,
    })
}

/// Coefficients of the backward generator and the partials the prolongation needs.
/// Partials not listed vanish for this generator family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardInfinitesimals {
    pub t: f64,
    pub z: f64,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub t_t: f64,
    pub z_z: f64,
    pub u_u: f64,
    pub v_u: f64,
    pub v_v: f64,
    pub w_u: f64,
    pub w_w: f64,
}

pub fn backward_infinitesimals(
    s: &AdjointState,
    p: &ModelParams,
    gc: &GroupConstants,
) -> Result<BackwardInfinitesimals> {
    let phi = p.phase(s.z);
    let (z, z_z, ln_u, inv_u) = if gc.k4 != 0.0 {
        if s.u.is_nan() || s.u <= U_MIN {
            return Err(Error::Domain(format!("backward symmetry with k4 != 0 needs u > {U_MIN}, got {}", s.u)));
        }
        let c = phi.cos();
        if c.abs() < COS_LIMIT {
            return Err(Error::Singularity { what: "tan(phi)", phi });
        }
        (gc.k4 * phi.tan(), gc.k4 * p.theta1 / (c * c), s.u.ln(), 1.0 / s.u)
    } else {
        (0.0, 0.0, 0.0, 0.0)
    };
    let k4t1 = gc.k4 * p.theta1;
    let scale = gc.k3 + k4t1 * ln_u;
    Ok(BackwardInfinitesimals {
        t: gc.k2,
        z,
        u: gc.k3 * s.u + k4t1 * s.u * ln_u,
        v: scale * s.v + gc.g.eval(s.u),
        w: scale * s.w + gc.h.eval(s.u),
        t_t: 0.0,
        z_z,
        u_u: gc.k3 + if gc.k4 != 0.0 { k4t1 * (ln_u + 1.0) } else { 0.0 },
        v_u: k4t1 * s.v * inv_u + gc.g.derivative(s.u),
        v_v: scale,
        w_u: k4t1 * s.w * inv_u + gc.h.derivative(s.u),
        w_w: scale,
    })
}

/// Image of `(t, z)` under the forward group at parameter `gc.epsilon`.
pub fn forward_transform(
    t: f64,
    z: f64,
    p: &ModelParams,
    gc: &GroupConstants,
    mode: TransformMode,
) -> Result<(f64, f64)> {
    let eps = gc.epsilon;
    let parts = forward_parts(z, p, gc)?;
    let t_bar = gc.c2 * eps + (1.0 + gc.c1 * eps) * t;
    let z_bar = match mode {
        TransformMode::Canonical => z + eps * (parts.c1_part + parts.c3_part),
        // the c3 term carries no epsilon
        TransformMode::Literal => z + eps * parts.c1_part + parts.c3_part,
    };
    Ok((t_bar, z_bar))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardImage {
    pub t: f64,
    pub state: AdjointState,
}

pub fn backward_transform(
    t: f64,
    s: &AdjointState,
    p: &ModelParams,
    gc: &GroupConstants,
    mode: TransformMode,
) -> Result<BackwardImage> {
    let eps = gc.epsilon;
    let x = backward_infinitesimals(s, p, gc)?;
    let u_bar = match mode {
        TransformMode::Canonical => s.u + eps * x.u,
        TransformMode::Literal => {
            // (1 + k3 eps + k4 theta1 ln u) u
            let ln_term = if gc.k4 != 0.0 { gc.k4 * p.theta1 * s.u.ln() } else { 0.0 };
            (1.0 + gc.k3 * eps + ln_term) * s.u
        }
    };
    Ok(BackwardImage {
        t: t + eps * x.t,
        state: AdjointState { u: u_bar, v: s.v + eps * x.v, w: s.w + eps * x.w, z: s.z + eps * x.z },
    })
}

/// Forward determining expression
/// `Z_t + (Z_z - T_t - T_z cos phi) cos phi + theta1 Z sin phi` for a candidate generator.
pub fn determining_residual_forward(z: f64, p: &ModelParams, x: &ForwardInfinitesimals) -> f64 {
    let (s, c) = p.phase(z).sin_cos();
    x.z_t + (x.z_z - x.t_t - x.t_z * c) * c + p.theta1 * x.z * s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackwardResiduals {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
}

impl BackwardResiduals {
    pub fn max_abs(&self) -> f64 {
        [self.r1, self.r2, self.r3, self.r4].iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// `pr(X) Delta_i` for the four adjoint-system equations, with the derivatives
/// of `(u, v, w, z)` taken from the adjoint ODEs.
pub fn determining_residuals_backward_with(
    s: &AdjointState,
    p: &ModelParams,
    x: &BackwardInfinitesimals,
) -> BackwardResiduals {
    let (sin, cos) = p.phase(s.z).sin_cos();
    let th = p.theta1;
    let du = s.u * th * sin;
    let dv = s.u * s.z * sin;
    let dw = s.u * sin;
    let dz = cos;

    let u_t = x.u_u * du - du * x.t_t;
    let v_t = x.v_u * du + x.v_v * dv - dv * x.t_t;
    let w_t = x.w_u * du + x.w_w * dw - dw * x.t_t;
    let z_t = x.z_z * dz - dz * x.t_t;

    BackwardResiduals {
        r1: u_t - th * sin * x.u - s.u * th * th * cos * x.z,
        r2: v_t - s.z * sin * x.u - s.u * (sin + s.z * th * cos) * x.z,
        r3: w_t - sin * x.u - s.u * th * cos * x.z,
        r4: z_t + th * sin * x.z,
    }
}

pub fn determining_residuals_backward(
    s: &AdjointState,
    p: &ModelParams,
    gc: &GroupConstants,
) -> Result<BackwardResiduals> {
    let x = backward_infinitesimals(s, p, gc)?;
    Ok(determining_residuals_backward_with(s, p, &x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingAudit {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln(max residual)` against `ln(epsilon)`;
    /// `None` when some maximum is zero.
    pub slope: Option<f64>,
}

/// Maximum chain-mode forward conservation residual over `grid` for each epsilon,
/// plus the log-log slope of maximum against epsilon.
pub fn epsilon_scaling_audit(
    p: &ModelParams,
    gc_base: &GroupConstants,
    eps_list: &[f64],
    grid: &[f64],
) -> Result<ScalingAudit> {
    if eps_list.is_empty() || grid.is_empty() {
        return Err(Error::Config("epsilon list and grid must be non-empty".into()));
    }
    if eps_list.iter().any(|e| e.is_nan() || *e <= 0.0) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("epsilon list must be positive and decreasing, got {eps_list:?}")));
    }
    let rows = eps_list
        .iter()
        .map(|&eps| {
            let gc = gc_base.with_epsilon(eps);
            let values: Vec<f64> = grid
                .par_iter()
                .map(|&z| residual_f(z, p, &gc, ResidualMode::Chain).map(f64::abs))
                .collect::<Result<_>>()?;
            let max_residual = values.into_iter().fold(0.0, f64::max);
            Ok(ScalingRow { epsilon: eps, max_residual })
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = if rows.len() >= 2 && rows.iter().all(|r| r.max_residual > 0.0) {
        let xs: Vec<f64> = rows.iter().map(|r| r.epsilon.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.max_residual.ln()).collect();
        Some(least_squares_slope(&xs, &ys))
    } else {
        None
    };
    Ok(ScalingAudit { rows, slope })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Grid of `z` values whose phase spans `[-phi_max, phi_max]` (clipped away from `+-pi/2`).
pub fn phase_grid(p: &ModelParams, phi_max: f64, points: usize) -> Vec<f64> {
    let phi_max = phi_max.min(FRAC_PI_2 - 1e-6);
    (0..points)
        .map(|i| {
            let phi = if points == 1 { 0.0 } else { -phi_max + 2.0 * phi_max * i as f64 / (points - 1) as f64 };
            (phi - p.theta2) / p.theta1
        })
        .collect()
}
