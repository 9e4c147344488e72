//! Generalized-momentum observer in platform coordinates.
//!
//! The residual `F_hat = K_o (M_x xd - integral(F_m - beta_hat + F_hat) dt)` obeys
//! `K_o^-1 dF_hat/dt + F_hat = F_ext` for an exact model, i.e. every axis is a
//! first-order low-pass of the true external wrench.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsTerms;
use crate::error::{Error, Result};

/// Default per-axis gain, the inverse of a 50 ms time constant [1/s].
pub const DEFAULT_GAIN: f64 = 20.0;

/// Default detection thresholds `(F_x [N], F_y [N], M_z [Nm])`.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [10.0, 10.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverConfig {
    /// Diagonal of `K_o` [1/s].
    pub gain: [f64; 3],
    /// Sample time [s].
    pub dt: f64,
    /// Standard deviation of the Gaussian noise on measured active joint velocities [rad/s].
    pub velocity_noise_std: f64,
    /// Scale applied to every mass and inertia of the observer's model (1 = exact).
    pub inertia_mismatch: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self { gain: [DEFAULT_GAIN; 3], dt: 1e-3, velocity_noise_std: 0.0, inertia_mismatch: 1.0 }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gain.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Config("observer gains must be > 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("observer sample time must be > 0".into()));
        }
        if !(self.velocity_noise_std >= 0.0) || !(self.inertia_mismatch > 0.0) {
            return Err(Error::Config("noise must be >= 0 and the inertia scale > 0".into()));
        }
        Ok(())
    }
}

/// `beta_hat = g_x + F_fr - C_x^T xd`.
pub fn beta_hat(terms: &DynamicsTerms, xdot: &Vector3<f64>) -> Vector3<f64> {
    terms.gravity + terms.friction - terms.coriolis.transpose() * xdot
}

/// Estimate, integral and gain of the observer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObserverState {
    pub estimate: Vector3<f64>,
    pub integral: Vector3<f64>,
    pub gain: Vector3<f64>,
}

impl ObserverState {
    /// Observer started at a contact-free state: the integral is seeded with
    /// the current momentum so the estimate starts at zero.
    pub fn new(gain: Vector3<f64>, mass: &Matrix3<f64>, xdot: &Vector3<f64>) -> Self {
        Self { estimate: Vector3::zeros(), integral: mass * xdot, gain }
    }

    pub fn from_config(config: &ObserverConfig, mass: &Matrix3<f64>, xdot: &Vector3<f64>) -> Self {
        Self::new(Vector3::from(config.gain), mass, xdot)
    }
}

/// One explicit-Euler update of the integral followed by the new residual.
///
/// `f_m` and `beta` belong to the start of the step; `mass` and `xdot` to its end.
pub fn observer_step(
    state: &ObserverState,
    f_m: &Vector3<f64>,
    beta: &Vector3<f64>,
    mass: &Matrix3<f64>,
    xdot: &Vector3<f64>,
    dt: f64,
) -> ObserverState {
    let integral = state.integral + dt * (f_m - beta + state.estimate);
    let estimate = state.gain.component_mul(&(mass * xdot - integral));
    ObserverState { estimate, integral, gain: state.gain }
}

/// Per-axis and aggregated threshold test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detection {
    pub axes: [bool; 3],
    pub any: bool,
}

/// `|F_hat_i| > eps_i` on any axis.
pub fn detect_contact(f_hat: &Vector3<f64>, thresholds: &[f64; 3]) -> Detection {
    let axes = [0, 1, 2].map(|i| f_hat[i].abs() > thresholds[i]);
    Detection { axes, any: axes.iter().any(|a| *a) }
}
