//! Cartesian impedance control and the reaction control modes.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsTerms, RobotModel, RobotState};
use crate::error::{Error, Result};
use crate::kinematics::{self, wrap_angle, JointVector, KinematicJacobians};

/// Translational force below which no retraction direction is defined [N].
pub const MIN_RETRACTION_FORCE: f64 = 0.5;

/// Diagonal stiffness and per-axis damping ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpedanceGains {
    /// `(k_x [N/m], k_y [N/m], k_phi [Nm/rad])`.
    pub stiffness: [f64; 3],
    pub damping_ratio: [f64; 3],
}

impl Default for ImpedanceGains {
    fn default() -> Self {
        // 2 N/mm, 2 N/mm, 85 Nm/rad
        Self { stiffness: [2000.0, 2000.0, 85.0], damping_ratio: [1.0; 3] }
    }
}

impl ImpedanceGains {
    pub fn validate(&self) -> Result<()> {
        if self.stiffness.iter().any(|k| !(*k >= 0.0)) || self.damping_ratio.iter().any(|z| !(*z > 0.0)) {
            return Err(Error::Config("stiffness must be >= 0 and damping ratios > 0".into()));
        }
        Ok(())
    }
}

/// Speeds and limits of the reactions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactionConfig {
    /// [m/s]
    pub retraction_speed: f64,
    /// Total setpoint travel of a retraction [m].
    pub retraction_distance: f64,
    /// Rate of the clamp angle during structure opening [rad/s].
    pub opening_rate: f64,
    /// Total clamp-angle increase of a structure opening [rad].
    pub opening_angle: f64,
    /// Fraction of the friction model compensated in zero-g mode.
    pub zero_g_friction_fraction: f64,
}

impl Default for ReactionConfig {
    fn default() -> Self {
        Self {
            retraction_speed: 0.05,
            retraction_distance: 0.08,
            opening_rate: 0.2,
            opening_angle: 0.4,
            zero_g_friction_fraction: 0.9,
        }
    }
}

impl ReactionConfig {
    pub fn validate(&self) -> Result<()> {
        let v = [self.retraction_speed, self.retraction_distance, self.opening_rate, self.opening_angle];
        if v.iter().any(|x| !(*x > 0.0)) || !(0.0..=1.0).contains(&self.zero_g_friction_fraction) {
            return Err(Error::Config("reaction speeds and limits must be > 0, friction fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Active control mode of an episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ControlMode {
    /// Follow the nominal setpoint trajectory.
    Nominal,
    /// Move the setpoint along a unit direction (planar, zero rotation).
    Retraction { direction: Vector3<f64> },
    /// Move the setpoint so the clamp angle of `chain` changes with `sign` (+1 opens).
    StructureOpening { chain: usize, sign: f64 },
    /// Friction compensation only.
    ZeroG,
}

/// Mode without its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Nominal,
    Retraction,
    StructureOpening,
    ZeroG,
}

impl ControlMode {
    pub fn kind(&self) -> ModeKind {
        match self {
            ControlMode::Nominal => ModeKind::Nominal,
            ControlMode::Retraction { .. } => ModeKind::Retraction,
            ControlMode::StructureOpening { .. } => ModeKind::StructureOpening,
            ControlMode::ZeroG => ModeKind::ZeroG,
        }
    }
}

impl ModeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Nominal => "nominal",
            ModeKind::Retraction => "retraction",
            ModeKind::StructureOpening => "structure_opening",
            ModeKind::ZeroG => "zero_g",
        }
    }
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrt_spd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Factorization damping design `D = M^1/2 Z K^1/2 + K^1/2 Z M^1/2`.
pub fn damping_matrix(mass: &Matrix3<f64>, stiffness: &Vector3<f64>, zeta: &Vector3<f64>) -> Matrix3<f64> {
    let m_half = sqrt_spd(mass);
    let k_half = Matrix3::from_diagonal(&stiffness.map(|k| k.max(0.0).sqrt()));
    let z = Matrix3::from_diagonal(zeta);
    m_half * z * k_half + k_half * z * m_half
}

/// Pose error `x_d - x` with the angle wrapped.
pub fn pose_error(x_d: &Vector3<f64>, x: &Vector3<f64>) -> Vector3<f64> {
    let mut e = x_d - x;
    e.z = wrap_angle(e.z);
    e
}

/// `F_m = K (x_d - x) + D (xd_d - xd) + c_x + F_fr`.
pub fn impedance_law(
    state: &RobotState,
    x_d: &Vector3<f64>,
    xdot_d: &Vector3<f64>,
    gains: &ImpedanceGains,
    terms: &DynamicsTerms,
) -> Vector3<f64> {
    let k = Vector3::from(gains.stiffness);
    let d = damping_matrix(&terms.mass, &k, &Vector3::from(gains.damping_ratio));
    k.component_mul(&pose_error(x_d, &state.x)) + d * (xdot_d - state.xdot) + terms.coriolis_force + terms.gravity
        + terms.friction
}

/// Zero-g command: gravity (zero for the planar robot) and a fraction of the
/// smooth Coulomb friction. Viscous friction is left to damp the drift.
pub fn zero_g_command(terms: &DynamicsTerms, friction_fraction: f64) -> Vector3<f64> {
    terms.gravity + friction_fraction * terms.coulomb_friction
}

/// Retraction along the translational part of the estimated external force.
pub fn retraction_command(f_hat: &Vector3<f64>) -> Result<ControlMode> {
    let planar = nalgebra::Vector2::new(f_hat.x, f_hat.y);
    let n = planar.norm();
    if n < MIN_RETRACTION_FORCE {
        return Err(Error::DegenerateDirection(n));
    }
    Ok(ControlMode::Retraction { direction: Vector3::new(planar.x / n, planar.y / n, 0.0) })
}

/// Structure opening of `chain`: increase its clamp angle.
pub fn structure_opening_command(chain: usize, q: &JointVector, jac: &KinematicJacobians) -> Result<ControlMode> {
    let g = kinematics::clamp_angle_gradient(q, jac, chain);
    if g.norm() < 1e-9 {
        return Err(Error::Singular(format!("clamp angle of chain {} is insensitive to the platform", chain + 1)));
    }
    Ok(ControlMode::StructureOpening { chain, sign: 1.0 })
}

/// Setpoint velocity that changes the clamp angle of `chain` at `rate`
/// (minimum-norm solution of `grad . xd_d = rate`).
pub fn opening_velocity(q: &JointVector, jac: &KinematicJacobians, chain: usize, rate: f64) -> Vector3<f64> {
    let g = kinematics::clamp_angle_gradient(q, jac, chain);
    rate * g / g.norm_squared()
}

/// Reaction setpoints stop short of poses where the actuator Jacobian is worse
/// conditioned than this.
pub const SETPOINT_CONDITION_LIMIT: f64 = 100.0;

/// Setpoint reachable with the model's branch and well away from singularities.
pub fn admissible(model: &RobotModel, x: &Vector3<f64>) -> bool {
    let Ok(state) = model.state(*x, Vector3::zeros()) else { return false };
    let Ok(jac) = model.jacobians(&state) else { return false };
    let s = jac.j_xqa.singular_values();
    s.min() > 0.0 && s.max() / s.min() < SETPOINT_CONDITION_LIMIT
}

/// Piecewise-linear nominal setpoint: rest, constant velocity over `[start, start + duration]`, hold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NominalTrajectory {
    pub origin: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub start: f64,
    pub duration: f64,
}

impl NominalTrajectory {
    pub fn hold(origin: Vector3<f64>) -> Self {
        Self { origin, velocity: Vector3::zeros(), start: 0.0, duration: 0.0 }
    }

    pub fn setpoint(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let tau = (t - self.start).clamp(0.0, self.duration);
        let moving = t >= self.start && t < self.start + self.duration;
        (self.origin + tau * self.velocity, if moving { self.velocity } else { Vector3::zeros() })
    }
}

/// Per-episode controller: nominal tracking plus the latched reaction.
#[derive(Clone, Debug)]
pub struct Controller {
    pub gains: ImpedanceGains,
    pub reactions: ReactionConfig,
    pub nominal: NominalTrajectory,
    mode: ControlMode,
    setpoint: Vector3<f64>,
    setpoint_velocity: Vector3<f64>,
    travelled: f64,
}

impl Controller {
    pub fn new(gains: ImpedanceGains, reactions: ReactionConfig, nominal: NominalTrajectory) -> Self {
        Self {
            gains,
            reactions,
            setpoint: nominal.origin,
            nominal,
            mode: ControlMode::Nominal,
            setpoint_velocity: Vector3::zeros(),
            travelled: 0.0,
        }
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn setpoint(&self) -> Vector3<f64> {
        self.setpoint
    }

    /// Switches mode; reactions start from the measured pose.
    pub fn set_mode(&mut self, mode: ControlMode, state: &RobotState) {
        self.mode = mode;
        self.setpoint = state.x;
        self.setpoint_velocity = Vector3::zeros();
        self.travelled = 0.0;
    }

    /// Motor command for the current step; advances the reaction setpoint by `dt`.
    pub fn command(&mut self, model: &RobotModel, t: f64, dt: f64, state: &RobotState, terms: &DynamicsTerms) -> Vector3<f64> {
        match self.mode {
            ControlMode::Nominal => {
                let (xd, vd) = self.nominal.setpoint(t);
                self.setpoint = xd;
                self.setpoint_velocity = vd;
            }
            ControlMode::Retraction { direction } => {
                self.setpoint_velocity = Vector3::zeros();
                if self.travelled < self.reactions.retraction_distance {
                    let v = self.reactions.retraction_speed * direction;
                    if admissible(model, &(self.setpoint + dt * v)) {
                        self.setpoint_velocity = v;
                        self.setpoint += dt * v;
                        self.travelled += dt * self.reactions.retraction_speed;
                    } else {
                        self.travelled = f64::INFINITY;
                    }
                }
            }
            ControlMode::StructureOpening { chain, sign } => {
                self.setpoint_velocity = Vector3::zeros();
                if self.travelled < self.reactions.opening_angle {
                    // gradient evaluated at the setpoint pose
                    if let Ok(sp) = model.state(self.setpoint, Vector3::zeros()) {
                        if let Ok(jac) = model.jacobians(&sp) {
                            let v = opening_velocity(&sp.q, &jac, chain, sign * self.reactions.opening_rate);
                            if admissible(model, &(self.setpoint + dt * v)) {
                                self.setpoint_velocity = v;
                                self.setpoint += dt * v;
                                self.travelled += dt * self.reactions.opening_rate;
                            } else {
                                self.travelled = f64::INFINITY;
                            }
                        }
                    }
                }
            }
            ControlMode::ZeroG => {
                return zero_g_command(terms, self.reactions.zero_g_friction_fraction);
            }
        }
        impedance_law(state, &self.setpoint, &self.setpoint_velocity, &self.gains, terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn damping_closed_forms() {
        let m = Matrix3::identity();
        assert_eq!(damping_matrix(&m, &Vector3::zeros(), &Vector3::repeat(1.0)), Matrix3::zeros());
        assert_relative_eq!(
            damping_matrix(&m, &Vector3::repeat(1.0), &Vector3::repeat(1.0)),
            2.0 * Matrix3::identity(),
            epsilon = 1e-14
        );
        // scalar case: 2 zeta sqrt(m k)
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 3.0, 0.05));
        let d = damping_matrix(&m, &Vector3::new(2000.0, 2000.0, 85.0), &Vector3::repeat(1.0));
        assert_relative_eq!(d[(0, 0)], 2.0 * (3.0f64 * 2000.0).sqrt(), epsilon = 1e-9);
        assert_relative_eq!(d[(2, 2)], 2.0 * (0.05f64 * 85.0).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn damping_is_symmetric_psd() {
        let m = Matrix3::new(2.0, 0.3, 0.05, 0.3, 1.5, -0.02, 0.05, -0.02, 0.08);
        let d = damping_matrix(&m, &Vector3::new(2000.0, 2000.0, 85.0), &Vector3::repeat(1.0));
        assert!((d - d.transpose()).amax() < 1e-12);
        assert!(d.symmetric_eigenvalues().min() >= -1e-12);
    }

    #[test]
    fn impedance_spring_force() {
        let mut model = RobotModel::default();
        model.params = model.params.frictionless();
        let state = model.state(Vector3::zeros(), Vector3::zeros()).unwrap();
        let terms = model.terms(&state).unwrap();
        let gains = ImpedanceGains::default();
        let f = impedance_law(&state, &state.x, &Vector3::zeros(), &gains, &terms);
        assert_eq!(f, Vector3::zeros());
        let f = impedance_law(&state, &Vector3::new(0.001, 0.0, 0.0), &Vector3::zeros(), &gains, &terms);
        assert_relative_eq!(f, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_g_at_rest_is_zero() {
        let model = RobotModel::default();
        let state = model.state(Vector3::new(0.01, 0.0, 0.0), Vector3::zeros()).unwrap();
        let terms = model.terms(&state).unwrap();
        assert_eq!(zero_g_command(&terms, 0.9), Vector3::zeros());
    }

    #[test]
    fn retraction_direction_is_normalised() {
        match retraction_command(&Vector3::new(10.0, 0.0, 0.1)).unwrap() {
            ControlMode::Retraction { direction } => assert_relative_eq!(direction, Vector3::new(1.0, 0.0, 0.0)),
            m => panic!("{m:?}"),
        }
        assert!(matches!(
            retraction_command(&Vector3::new(0.1, -0.2, 2.0)),
            Err(Error::DegenerateDirection(_))
        ));
    }

    #[test]
    fn opening_velocity_increases_clamp_angle() {
        let model = RobotModel::default();
        let state = model.state(Vector3::new(0.02, -0.01, 0.05), Vector3::zeros()).unwrap();
        let jac = model.jacobians(&state).unwrap();
        for chain in 0..3 {
            let v = opening_velocity(&state.q, &jac, chain, 0.2);
            let g = kinematics::clamp_angle_gradient(&state.q, &jac, chain);
            assert!(v.dot(&g) > 0.0);
            assert_relative_eq!(v.dot(&g), 0.2, epsilon = 1e-12);
            assert!(structure_opening_command(chain, &state.q, &jac).is_ok());
        }
    }

    #[test]
    fn nominal_trajectory_ramps_and_holds() {
        let tr = NominalTrajectory {
            origin: Vector3::zeros(),
            velocity: Vector3::new(0.1, 0.0, 0.0),
            start: 0.5,
            duration: 1.0,
        };
        assert_eq!(tr.setpoint(0.2).0, Vector3::zeros());
        assert_relative_eq!(tr.setpoint(1.0).0.x, 0.05, epsilon = 1e-15);
        assert_eq!(tr.setpoint(1.0).1, Vector3::new(0.1, 0.0, 0.0));
        assert_relative_eq!(tr.setpoint(3.0).0.x, 0.1, epsilon = 1e-15);
        assert_eq!(tr.setpoint(3.0).1, Vector3::zeros());
    }
}
