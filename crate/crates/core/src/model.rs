//! The single cosine-neuron model `dz/dt = cos(theta1 * z + theta2)`.
//!
//! It arises from a unit-charge, unit-mass particle in the field
//! `E = -(theta1 * E0 / 2) sin(2 (theta1 x + theta2))` after one integration
//! in time with `E0 = 1`. Along solutions the phase `phi = theta1 z + theta2`
//! obeys `phi' = theta1 cos(phi)`, whose flow is the Gudermannian function;
//! [`exact_solution`] uses that as a closed-form oracle.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `|theta1|` the model is treated as `dz/dt = cos(theta2)`.
pub const THETA1_MIN: f64 = 1e-8;

/// Minimum distance of the phase from the equilibria `+-pi/2`.
pub const EQUILIBRIUM_MARGIN: f64 = 1e-6;

/// Weight and bias of the hidden cosine neuron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta1: f64,
    pub theta2: f64,
}

impl ModelParams {
    pub const fn new(theta1: f64, theta2: f64) -> Self {
        Self { theta1, theta2 }
    }

    /// `theta1 * z + theta2`.
    #[inline]
    pub fn phase(&self, z: f64) -> f64 {
        self.theta1 * z + self.theta2
    }

    pub fn is_finite(&self) -> bool {
        self.theta1.is_finite() && self.theta2.is_finite()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        (self.theta1 - other.theta1).abs().max((self.theta2 - other.theta2).abs())
    }
}

#[inline]
pub fn rhs_forward(z: f64, p: &ModelParams) -> f64 {
    p.phase(z).cos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhsJacobians {
    pub df_dz: f64,
    pub df_dtheta1: f64,
    pub df_dtheta2: f64,
}

pub fn rhs_jacobians(z: f64, p: &ModelParams) -> RhsJacobians {
    let s = p.phase(z).sin();
    RhsJacobians { df_dz: -p.theta1 * s, df_dtheta1: -z * s, df_dtheta2: -s }
}

/// Electric field at `x` and the resulting acceleration (`q = m = 1`).
pub fn field_and_accel(x: f64, p: &ModelParams, e0: f64) -> (f64, f64) {
    let field = -(p.theta1 * e0 / 2.0) * (2.0 * p.phase(x)).sin();
    (field, field)
}

/// Gudermannian `gd(x) = arcsin(tanh x)`, evaluated as `2 atan(tanh(x/2))`
/// which keeps full precision near `+-pi/2`.
pub fn gd(x: f64) -> f64 {
    2.0 * (0.5 * x).tanh().atan()
}

/// Inverse Gudermannian `atanh(sin phi)`.
pub fn gd_inv(phi: f64) -> f64 {
    phi.sin().atanh()
}

/// Closed-form `z(t)` from `z(0) = z0`.
pub fn exact_solution(z0: f64, t: f64, p: &ModelParams) -> Result<f64> {
    if p.theta1.abs() < THETA1_MIN {
        return Ok(z0 + t * p.theta2.cos());
    }
    let phi0 = p.phase(z0);
    if phi0.is_nan() || phi0.abs() >= FRAC_PI_2 - EQUILIBRIUM_MARGIN {
        return Err(Error::Domain(format!(
            "initial phase {phi0} is not inside (-pi/2, pi/2) with margin {EQUILIBRIUM_MARGIN}"
        )));
    }
    if t == 0.0 {
        return Ok(z0);
    }
    Ok((gd(p.theta1 * t + gd_inv(phi0)) - p.theta2) / p.theta1)
}

/// Right-hand side in the integrator's calling convention.
pub fn forward_system(p: ModelParams) -> impl Fn(f64, &[f64], &mut [f64]) + Sync {
    move |_t, x, out| out[0] = rhs_forward(x[0], &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn forward_values() {
        assert_eq!(rhs_forward(0.0, &ModelParams::new(1.0, 0.0)), 1.0);
        assert!(rhs_forward(FRAC_PI_2, &ModelParams::new(1.0, 0.0)).abs() < 1e-15);
        assert!((rhs_forward(0.5, &ModelParams::new(2.0, 0.3)) - 0.2674988286).abs() < 1e-9);
    }

    #[test]
    fn jacobian_values() {
        let j = rhs_jacobians(0.0, &ModelParams::new(1.0, 0.0));
        assert_eq!((j.df_dz, j.df_dtheta1, j.df_dtheta2), (-0.0, -0.0, -0.0));
        let j = rhs_jacobians(FRAC_PI_2, &ModelParams::new(1.0, 0.0));
        assert!((j.df_dz + 1.0).abs() < 1e-15);
        assert!((j.df_dtheta1 + FRAC_PI_2).abs() < 1e-15);
        assert!((j.df_dtheta2 + 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let h = 1e-6;
        for &(z, t1, t2) in &[(0.3, 1.0, 0.0), (-1.2, 0.7, 0.4), (2.0, -1.5, 1.1), (0.0, 2.0, -0.6)] {
            let p = ModelParams::new(t1, t2);
            let j = rhs_jacobians(z, &p);
            let dz = central(|z| rhs_forward(z, &p), z, h);
            let d1 = central(|a| rhs_forward(z, &ModelParams::new(a, t2)), t1, h);
            let d2 = central(|b| rhs_forward(z, &ModelParams::new(t1, b)), t2, h);
            assert!((j.df_dz - dz).abs() < 1e-8);
            assert!((j.df_dtheta1 - d1).abs() < 1e-8);
            assert!((j.df_dtheta2 - d2).abs() < 1e-8);
        }
    }

    #[test]
    fn field_values() {
        assert_eq!(field_and_accel(0.0, &ModelParams::new(1.0, 0.0), 1.0), (-0.0, -0.0));
        let (e, a) = field_and_accel(FRAC_PI_4, &ModelParams::new(1.0, 0.0), 1.0);
        assert!((e + 0.5).abs() < 1e-15 && (a + 0.5).abs() < 1e-15);
    }

    #[test]
    fn acceleration_is_chain_rule_of_velocity() {
        // x'' = d(x'^2 / 2)/dx = f * df/dz
        for &(x, t1, t2) in &[(0.4, 1.0, 0.0), (-0.8, 1.7, 0.2), (1.3, -0.6, 0.9)] {
            let p = ModelParams::new(t1, t2);
            let (_, accel) = field_and_accel(x, &p, 1.0);
            let chain = rhs_forward(x, &p) * rhs_jacobians(x, &p).df_dz;
            assert!((accel - chain).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_solution_values() {
        let p = ModelParams::new(1.0, 0.0);
        assert!((exact_solution(0.0, 1.0, &p).unwrap() - 0.8657694832).abs() < 1e-10);
        assert!((exact_solution(0.3, 2.0, &ModelParams::new(0.0, 0.0)).unwrap() - 2.3).abs() < 1e-15);
        // pi/2 - 2 e^-10 to leading order
        let z10 = exact_solution(0.0, 10.0, &p).unwrap();
        assert!((z10 - 1.5707055269).abs() < 1e-9);
        assert!((z10 - 10.0_f64.tanh().asin()).abs() < 1e-9);
    }

    #[test]
    fn exact_solution_domain() {
        let p = ModelParams::new(1.0, 0.0);
        assert!(matches!(exact_solution(FRAC_PI_2, 1.0, &p), Err(Error::Domain(_))));
        assert!(matches!(exact_solution(-PI, 1.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_solution_at_zero_time() {
        for z0 in [-1.0, 0.0, 0.5] {
            assert_eq!(exact_solution(z0, 0.0, &ModelParams::new(1.5, 0.2)).unwrap(), z0);
        }
    }

    #[test]
    fn oracle_satisfies_ode() {
        let dt = 1e-5;
        for p in [ModelParams::new(1.0, 0.0), ModelParams::new(1.5, 0.2)] {
            for z0 in [-1.0, 0.0, 0.5] {
                for k in 0..=50 {
                    let t = 0.1 * k as f64;
                    let z = exact_solution(z0, t, &p).unwrap();
                    let dz = (exact_solution(z0, t + dt, &p).unwrap() - exact_solution(z0, t - dt, &p).unwrap())
                        / (2.0 * dt);
                    assert!((dz - rhs_forward(z, &p)).abs() < 1e-8, "p={p:?} z0={z0} t={t}");
                }
            }
        }
    }

    #[test]
    fn phase_increases_monotonically_towards_equilibrium() {
        let p = ModelParams::new(1.3, -0.2);
        for z0 in [-0.9, 0.0, 0.8] {
            let mut prev = p.phase(z0);
            for k in 1..=200 {
                let phi = p.phase(exact_solution(z0, 0.05 * k as f64, &p).unwrap());
                assert!(phi > prev || phi >= FRAC_PI_2 - 1e-12, "phase stalled at step {k}");
                assert!(phi <= FRAC_PI_2);
                prev = phi;
            }
        }
    }
}
