//! Conservation-law residuals used as loss regularizers.
//!
//! Each law states that the transformed variables still satisfy the original
//! ODE, `d(x_bar)/d(t_bar) - f(x_bar) = 0`, with `d(x_bar)/d(t_bar)` obtained
//! by the chain rule and `x'` replaced by the right-hand side.
//!
//! - `F`: forward law for `z`.
//! - `G`, `H`, `I`: backward laws for `u`, `v`, `w`.
//!
//! [`ResidualMode::Literal`] evaluates fixed closed-form expressions that keep
//! first-order leftovers in `F` and `G` and carry the `c3` term of `F` without
//! `epsilon`. [`ResidualMode::Chain`] recomputes every law from the canonical
//! first-order transformations.

use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointState;
use crate::error::Result;
use crate::lie::{backward_infinitesimals, forward_infinitesimals, GroupConstants};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    Literal,
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub f: f64,
    pub g: f64,
    pub h: f64,
    pub i: f64,
}

/// `1 + k3 eps + k4 theta1 eps ln u`, the common scale of `u_bar / u`, `dv_bar/dv`, `dw_bar/dw`.
fn adjoint_scale(u: f64, p: &ModelParams, gc: &GroupConstants) -> f64 {
    let ln_term = if gc.k4 != 0.0 { gc.k4 * p.theta1 * u.ln() } else { 0.0 };
    1.0 + gc.epsilon * (gc.k3 + ln_term)
}

/// Shifted phase `theta1 z_bar + theta2` with `z_bar = z + eps k4 tan(phi)`.
fn shifted_backward_phase(phi: f64, p: &ModelParams, gc: &GroupConstants) -> f64 {
    if gc.k4 != 0.0 {
        phi + gc.k4 * p.theta1 * gc.epsilon * phi.tan()
    } else {
        phi
    }
}

pub fn residual_f(z: f64, p: &ModelParams, gc: &GroupConstants, mode: ResidualMode) -> Result<f64> {
    let eps = gc.epsilon;
    let phi = p.phase(z);
    let (s, c) = phi.sin_cos();
    match mode {
        ResidualMode::Chain => {
            let x = forward_infinitesimals(0.0, z, p, gc)?;
            Ok(c * (1.0 + eps * x.z_z) / (1.0 + eps * x.t_t) - (phi + p.theta1 * eps * x.z).cos())
        }
        ResidualMode::Literal => {
            // validates the domain of the atanh term
            forward_infinitesimals(0.0, z, p, gc)?;
            let a = if gc.c1 != 0.0 { s.atanh() } else { 0.0 };
            let c1e = gc.c1 * eps;
            let c3t = gc.c3 * p.theta1;
            Ok(c + c1e * c - c1e * s * c * a - c3t * s * c - (phi + c1e * c * a + c3t * c).cos())
        }
    }
}

/// Backward law for `u`, normalised by `u theta1`. `u` only matters when
/// `k4 != 0`; pass `None` to use `u = 1`.
pub fn residual_g(z: f64, u: Option<f64>, p: &ModelParams, gc: &GroupConstants, mode: ResidualMode) -> Result<f64> {
    let u = u.unwrap_or(1.0);
    let state = AdjointState::new(u, 0.0, 0.0, z);
    let x = backward_infinitesimals(&state, p, gc)?;
    let phi = p.phase(z);
    let shifted = shifted_backward_phase(phi, p, gc);
    match mode {
        ResidualMode::Literal => Ok(phi.sin() - shifted.sin()),
        ResidualMode::Chain => {
            let eps = gc.epsilon;
            Ok(phi.sin() * (1.0 + eps * x.u_u) - adjoint_scale(u, p, gc) * shifted.sin())
        }
    }
}

pub fn residual_h(z: f64, u: f64, v: f64, p: &ModelParams, gc: &GroupConstants, mode: ResidualMode) -> Result<f64> {
    let state = AdjointState::new(u, v, 0.0, z);
    let x = backward_infinitesimals(&state, p, gc)?;
    let eps = gc.epsilon;
    let phi = p.phase(z);
    let s = phi.sin();
    let shifted = shifted_backward_phase(phi, p, gc);
    let scale = adjoint_scale(u, p, gc);
    match mode {
        ResidualMode::Literal => {
            let th = p.theta1;
            let tan_term = if gc.k4 != 0.0 { gc.k4 * eps * phi.tan() } else { 0.0 };
            Ok(th * eps * gc.g.derivative(u) * u * s + gc.k4 * th * th * eps * v * s + u * z * scale * s
                - u * scale * (z + tan_term) * shifted.sin())
        }
        ResidualMode::Chain => {
            let du = u * p.theta1 * s;
            let dv = u * z * s;
            let dv_bar = (dv + eps * (x.v_u * du + x.v_v * dv)) / (1.0 + eps * x.t_t);
            let u_bar = u + eps * x.u;
            let z_bar = z + eps * x.z;
            Ok(dv_bar - u_bar * z_bar * p.phase(z_bar).sin())
        }
    }
}

pub fn residual_i(z: f64, u: f64, w: f64, p: &ModelParams, gc: &GroupConstants, mode: ResidualMode) -> Result<f64> {
    let state = AdjointState::new(u, 0.0, w, z);
    let x = backward_infinitesimals(&state, p, gc)?;
    let eps = gc.epsilon;
    let phi = p.phase(z);
    let s = phi.sin();
    let shifted = shifted_backward_phase(phi, p, gc);
    let scale = adjoint_scale(u, p, gc);
    match mode {
        ResidualMode::Literal => {
            let th = p.theta1;
            Ok(th * eps * gc.h.derivative(u) * u * s + gc.k4 * th * th * eps * w * s + u * scale * s
                - u * scale * shifted.sin())
        }
        ResidualMode::Chain => {
            let du = u * p.theta1 * s;
            let dw = u * s;
            let dw_bar = (dw + eps * (x.w_u * du + x.w_w * dw)) / (1.0 + eps * x.t_t);
            let u_bar = u + eps * x.u;
            let z_bar = z + eps * x.z;
            Ok(dw_bar - u_bar * p.phase(z_bar).sin())
        }
    }
}

/// All four residuals at one adjoint state.
pub fn residuals(s: &AdjointState, p: &ModelParams, gc: &GroupConstants, mode: ResidualMode) -> Result<ResidualVector> {
    Ok(ResidualVector {
        f: residual_f(s.z, p, gc, mode)?,
        g: residual_g(s.z, Some(s.u), p, gc, mode)?,
        h: residual_h(s.z, s.u, s.v, p, gc, mode)?,
        i: residual_i(s.z, s.u, s.w, p, gc, mode)?,
    })
}
