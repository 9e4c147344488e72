//! Operational-space rigid-body dynamics of the 3-RRR robot.
//!
//! Equations of motion in platform coordinates `x`:
//! `M_x xdd + c_x + g_x + F_fr = F_m + F_ext`, with `c_x = C_x xd`.
//! The mass matrix is assembled from body Jacobians and `C_x` follows from
//! Christoffel symbols of finite-differenced `M_x`, so `dM/dt = C + C^T` holds
//! by construction.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{self, Branch, JointVector, KinematicJacobians, PlatformPose, RobotGeometry};

/// Step of the central differences used for `dM/dx` [m, rad].
const MASS_FD_STEP: f64 = 1e-5;

/// Inertial and friction parameters. Link parameters are shared by the three
/// chains; friction is per active joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsParams {
    /// [kg]
    pub link1_mass: f64,
    /// [kg]
    pub link2_mass: f64,
    /// Rotational inertia about the centre of mass [kg m^2].
    pub link1_inertia: f64,
    /// [kg m^2]
    pub link2_inertia: f64,
    /// Centre of mass distance from the link's proximal joint [m].
    pub link1_com: f64,
    /// [m]
    pub link2_com: f64,
    /// [kg]
    pub platform_mass: f64,
    /// [kg m^2]
    pub platform_inertia: f64,
    /// Viscous friction per active joint [Nm s/rad].
    pub viscous: [f64; 3],
    /// Coulomb friction magnitude per active joint [Nm].
    pub coulomb: [f64; 3],
    /// Velocity scale of the `tanh` Coulomb regularisation [rad/s].
    pub coulomb_velocity_scale: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        let (l1, l2) = (0.3, 0.3);
        let (m1, m2) = (0.8, 0.6);
        Self {
            link1_mass: m1,
            link2_mass: m2,
            link1_inertia: m1 * l1 * l1 / 12.0,
            link2_inertia: m2 * l2 * l2 / 12.0,
            link1_com: l1 / 2.0,
            link2_com: l2 / 2.0,
            platform_mass: 1.5,
            platform_inertia: 0.01,
            viscous: [1.0; 3],
            coulomb: [0.1; 3],
            coulomb_velocity_scale: 0.01,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.link1_mass,
            self.link2_mass,
            self.link1_inertia,
            self.link2_inertia,
            self.platform_mass,
            self.platform_inertia,
            self.coulomb_velocity_scale,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("masses, inertias and the Coulomb velocity scale must be > 0".into()));
        }
        if self.viscous.iter().chain(&self.coulomb).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("friction coefficients must be >= 0".into()));
        }
        Ok(())
    }

    /// Same inertias with every friction coefficient set to zero.
    pub fn frictionless(&self) -> Self {
        Self { viscous: [0.0; 3], coulomb: [0.0; 3], ..self.clone() }
    }

    /// Mass and inertia scaled by `factor` (used for model-mismatch studies).
    pub fn scaled_inertia(&self, factor: f64) -> Self {
        Self {
            link1_mass: self.link1_mass * factor,
            link2_mass: self.link2_mass * factor,
            link1_inertia: self.link1_inertia * factor,
            link2_inertia: self.link2_inertia * factor,
            platform_mass: self.platform_mass * factor,
            platform_inertia: self.platform_inertia * factor,
            ..self.clone()
        }
    }
}

/// Geometry, dynamic parameters and assembly mode of the robot.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub geometry: RobotGeometry,
    pub params: DynamicsParams,
    pub branch: Branch,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            geometry: RobotGeometry::default(),
            params: DynamicsParams::default(),
            branch: kinematics::DEFAULT_BRANCH,
        }
    }
}

/// Platform pose and velocity with the matching joint angles.
#[derive(Clone, Copy, Debug)]
pub struct RobotState {
    pub x: Vector3<f64>,
    pub xdot: Vector3<f64>,
    pub q: JointVector,
}

impl RobotState {
    pub fn pose(&self) -> PlatformPose {
        PlatformPose::from_vector(&self.x)
    }
}

/// Velocity Jacobian of one rigid body: rows `(v_cx, v_cy, omega)`.
pub type BodyJacobian = Matrix3<f64>;

/// Model terms of the equations of motion at one state.
#[derive(Clone, Copy, Debug)]
pub struct DynamicsTerms {
    pub jacobians: KinematicJacobians,
    pub mass: Matrix3<f64>,
    pub coriolis: Matrix3<f64>,
    /// `C_x xd`.
    pub coriolis_force: Vector3<f64>,
    /// Always zero for the planar robot.
    pub gravity: Vector3<f64>,
    pub friction: Vector3<f64>,
    /// Coulomb part of `friction`.
    pub coulomb_friction: Vector3<f64>,
}

impl RobotModel {
    /// Builds the state at pose `x` and velocity `xdot` by inverse kinematics.
    pub fn state(&self, x: Vector3<f64>, xdot: Vector3<f64>) -> Result<RobotState> {
        let q = kinematics::ik_vec(&x, &self.geometry, &self.branch)?;
        Ok(RobotState { x, xdot, q })
    }

    pub fn jacobians(&self, state: &RobotState) -> Result<KinematicJacobians> {
        kinematics::jacobians(&state.q, &state.pose(), &self.geometry)
    }

    /// Body Jacobians for the six links (chain-major, proximal first) and the platform.
    pub fn body_jacobians(&self, q: &JointVector, jac: &KinematicJacobians) -> [BodyJacobian; 7] {
        let p = &self.params;
        let mut out = [Matrix3::zeros(); 7];
        for i in 0..3 {
            let c = &q.chains[i];
            let ja = jac.joint_row(i, 0);
            let jp = jac.joint_row(i, 1);
            let abs = c.active + c.passive;
            let d1 = nalgebra::Vector2::new(-c.active.sin(), c.active.cos());
            let d2 = nalgebra::Vector2::new(-abs.sin(), abs.cos());
            let l1 = self.geometry.link1_lengths[i];

            let v1 = (p.link1_com * d1) * ja;
            out[2 * i] = stack(v1.row(0).into_owned(), v1.row(1).into_owned(), ja);

            let jrel = ja + jp;
            let v2 = (l1 * d1) * ja + (p.link2_com * d2) * jrel;
            out[2 * i + 1] = stack(v2.row(0).into_owned(), v2.row(1).into_owned(), jrel);
        }
        out[6] = Matrix3::identity();
        out
    }

    /// Spatial inertia `diag(m, m, I)` of each body in [`Self::body_jacobians`] order.
    pub fn body_inertias(&self) -> [Vector3<f64>; 7] {
        let p = &self.params;
        let l1 = Vector3::new(p.link1_mass, p.link1_mass, p.link1_inertia);
        let l2 = Vector3::new(p.link2_mass, p.link2_mass, p.link2_inertia);
        [l1, l2, l1, l2, l1, l2, Vector3::new(p.platform_mass, p.platform_mass, p.platform_inertia)]
    }

    fn mass_from(&self, q: &JointVector, jac: &KinematicJacobians) -> Matrix3<f64> {
        let bodies = self.body_jacobians(q, jac);
        let inertias = self.body_inertias();
        let mut m = Matrix3::zeros();
        for (j, w) in bodies.iter().zip(inertias.iter()) {
            m += j.transpose() * Matrix3::from_diagonal(w) * j;
        }
        // exact symmetry
        0.5 * (m + m.transpose())
    }

    /// Mass matrix at pose `x`, solving inverse kinematics internally.
    pub fn mass_matrix_at(&self, x: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let state = self.state(*x, Vector3::zeros())?;
        let jac = self.jacobians(&state)?;
        Ok(self.mass_from(&state.q, &jac))
    }

    /// `M_x = sum_b J_b^T M_b J_b`.
    pub fn inertia_matrix(&self, state: &RobotState) -> Result<Matrix3<f64>> {
        let jac = self.jacobians(state)?;
        Ok(self.mass_from(&state.q, &jac))
    }

    /// Central-difference partial derivatives `dM/dx_k`, k = 0..3.
    pub fn mass_matrix_derivatives(&self, x: &Vector3<f64>) -> Result<[Matrix3<f64>; 3]> {
        let mut out = [Matrix3::zeros(); 3];
        for (k, d) in out.iter_mut().enumerate() {
            let mut xp = *x;
            xp[k] += MASS_FD_STEP;
            let mut xm = *x;
            xm[k] -= MASS_FD_STEP;
            *d = (self.mass_matrix_at(&xp)? - self.mass_matrix_at(&xm)?) / (2.0 * MASS_FD_STEP);
        }
        Ok(out)
    }

    /// Christoffel-symbol Coriolis matrix.
    pub fn coriolis_matrix(&self, state: &RobotState) -> Result<Matrix3<f64>> {
        let dm = self.mass_matrix_derivatives(&state.x)?;
        Ok(christoffel(&dm, &state.xdot))
    }

    /// Joint friction `d_v qd + d_c tanh(qd / v_s)` mapped to the platform with `J_xqa^-T`.
    pub fn friction_force(&self, qdot_a: &Vector3<f64>, j_xqa: &Matrix3<f64>) -> Result<Vector3<f64>> {
        let inv = j_xqa
            .try_inverse()
            .ok_or_else(|| Error::Singular("J_xqa is not invertible".into()))?;
        Ok(inv.transpose() * self.joint_friction(qdot_a))
    }

    /// Friction torques at the active joints.
    pub fn joint_friction(&self, qdot_a: &Vector3<f64>) -> Vector3<f64> {
        let p = &self.params;
        Vector3::from_fn(|i, _| p.viscous[i] * qdot_a[i]) + self.joint_coulomb(qdot_a)
    }

    /// Smooth Coulomb torques at the active joints.
    pub fn joint_coulomb(&self, qdot_a: &Vector3<f64>) -> Vector3<f64> {
        let p = &self.params;
        Vector3::from_fn(|i, _| p.coulomb[i] * (qdot_a[i] / p.coulomb_velocity_scale).tanh())
    }

    /// All model terms at `state`.
    pub fn terms(&self, state: &RobotState) -> Result<DynamicsTerms> {
        let jacobians = self.jacobians(state)?;
        let mass = self.mass_from(&state.q, &jacobians);
        let coriolis = self.coriolis_matrix(state)?;
        let qdot_a = jacobians.j_qax() * state.xdot;
        let friction = jacobians.j_qax().transpose() * self.joint_friction(&qdot_a);
        let coulomb_friction = jacobians.j_qax().transpose() * self.joint_coulomb(&qdot_a);
        Ok(DynamicsTerms {
            jacobians,
            mass,
            coriolis,
            coriolis_force: coriolis * state.xdot,
            gravity: Vector3::zeros(),
            friction,
            coulomb_friction,
        })
    }

    /// `F_m = M xdd + c + g + F_fr - F_ext`.
    pub fn inverse_dynamics(&self, state: &RobotState, xddot: &Vector3<f64>, f_ext: &Vector3<f64>) -> Result<Vector3<f64>> {
        let t = self.terms(state)?;
        Ok(t.mass * xddot + t.coriolis_force + t.gravity + t.friction - f_ext)
    }

    /// `xdd = M^-1 (F_m + F_ext - c - g - F_fr)`.
    pub fn forward_dynamics(&self, state: &RobotState, f_m: &Vector3<f64>, f_ext: &Vector3<f64>) -> Result<Vector3<f64>> {
        let t = self.terms(state)?;
        accelerate(&t, f_m, f_ext)
    }

    /// One semi-implicit Euler step of length `dt`.
    pub fn step(&self, state: &RobotState, terms: &DynamicsTerms, f_m: &Vector3<f64>, f_ext: &Vector3<f64>, dt: f64) -> Result<RobotState> {
        let xdd = accelerate(terms, f_m, f_ext)?;
        let xdot = state.xdot + dt * xdd;
        let x = state.x + dt * xdot;
        self.state(x, xdot)
    }

    /// Kinetic energy `1/2 xd^T M xd`.
    pub fn kinetic_energy(&self, state: &RobotState) -> Result<f64> {
        let m = self.inertia_matrix(state)?;
        Ok(0.5 * state.xdot.dot(&(m * state.xdot)))
    }
}

/// Platform acceleration from precomputed terms.
pub fn accelerate(t: &DynamicsTerms, f_m: &Vector3<f64>, f_ext: &Vector3<f64>) -> Result<Vector3<f64>> {
    let rhs = f_m + f_ext - t.coriolis_force - t.gravity - t.friction;
    t.mass
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Singular("mass matrix is not positive definite".into()))
}

/// `C_ij = sum_k 1/2 (dM_ij/dx_k + dM_ik/dx_j - dM_jk/dx_i) xd_k`.
pub fn christoffel(dm: &[Matrix3<f64>; 3], xdot: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| {
        (0..3)
            .map(|k| 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * xdot[k])
            .sum()
    })
}

/// Virtual-work projection `tau_a = J_xqa^T F_m`.
pub fn actuator_projection(f_m: &Vector3<f64>, j_xqa: &Matrix3<f64>) -> Vector3<f64> {
    j_xqa.transpose() * f_m
}

fn stack(r0: RowVector3<f64>, r1: RowVector3<f64>, r2: RowVector3<f64>) -> Matrix3<f64> {
    Matrix3::from_rows(&[r0, r1, r2])
}
