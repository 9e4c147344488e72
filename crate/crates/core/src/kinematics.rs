//! Closed-chain kinematics of the planar 3-RRR parallel robot.
//!
//! Each leg chain `i` consists of an actuated revolute joint fixed at the base
//! point `B_i`, a proximal link of length `l1_i`, a passive elbow joint, a distal
//! link of length `l2_i` and a passive coupling joint at the platform point
//! `C_i(x) = p + R(phi) a_i`.
//!
//! Angle conventions per chain: the active angle `q_a` is the absolute angle of
//! the proximal link, the passive angle `q_p` is the elbow angle relative to the
//! proximal link and the coupling angle `q_c` closes the orientation loop, so
//! that `q_a + q_p + q_c = phi` (mod 2 pi).

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, SMatrix, SVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x3 = SMatrix<f64, 9, 3>;
pub type Vector9 = SVector<f64, 9>;

/// Residual tolerance of the forward-kinematics Newton iteration (infinity norm).
pub const FK_TOLERANCE: f64 = 1e-12;
/// Iteration budget of the forward-kinematics Newton iteration.
pub const FK_MAX_ITERATIONS: usize = 50;
/// Largest orientation change accepted in a single Newton step [rad].
pub const FK_MAX_ANGLE_STEP: f64 = 0.2;
/// Largest translation accepted in a single Newton step [m].
pub const FK_MAX_TRANSLATION_STEP: f64 = 0.05;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[inline]
fn unit(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

/// Derivative of `unit(angle)` with respect to the angle.
#[inline]
fn unit_perp(angle: f64) -> Vec2 {
    Vec2::new(-angle.sin(), angle.cos())
}

#[inline]
fn perp(v: &Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

#[inline]
fn rotate(phi: f64, v: &Vec2) -> Vec2 {
    let (s, c) = phi.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Geometry of the three leg chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotGeometry {
    /// Actuated base joint positions in the world frame [m].
    pub base_joint_positions: [[f64; 2]; 3],
    /// Coupling joint positions in the platform frame [m].
    pub platform_coupling_offsets: [[f64; 2]; 3],
    /// Proximal (actuated) link lengths [m].
    pub link1_lengths: [f64; 3],
    /// Distal link lengths [m].
    pub link2_lengths: [f64; 3],
}

impl Default for RobotGeometry {
    fn default() -> Self {
        Self::symmetric(0.5, 0.1, 0.3, 0.3)
    }
}

impl RobotGeometry {
    /// Symmetric robot with base and platform joints at 90, 210 and 330 degrees.
    pub fn symmetric(base_radius: f64, platform_radius: f64, link1: f64, link2: f64) -> Self {
        // exact unit vectors, so the serialised defaults stay readable
        let h = 3f64.sqrt() / 2.0;
        let dirs = [[0.0, 1.0], [-h, -0.5], [h, -0.5]];
        Self {
            base_joint_positions: dirs.map(|[c, s]| [base_radius * c, base_radius * s]),
            platform_coupling_offsets: dirs.map(|[c, s]| [platform_radius * c, platform_radius * s]),
            link1_lengths: [link1; 3],
            link2_lengths: [link2; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.link1_lengths[i] > 0.0 && self.link2_lengths[i] > 0.0) {
                return Err(Error::Config(format!("chain {} has a non-positive link length", i + 1)));
            }
        }
        let collinear = |p: [[f64; 2]; 3]| {
            let a = Vec2::from(p[1]) - Vec2::from(p[0]);
            let b = Vec2::from(p[2]) - Vec2::from(p[0]);
            (a.x * b.y - a.y * b.x).abs() < 1e-9
        };
        if collinear(self.base_joint_positions) {
            return Err(Error::Config("base joints are collinear".into()));
        }
        if collinear(self.platform_coupling_offsets) {
            return Err(Error::Config("platform coupling offsets are collinear".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn base(&self, chain: usize) -> Vec2 {
        Vec2::from(self.base_joint_positions[chain])
    }

    #[inline]
    pub fn offset(&self, chain: usize) -> Vec2 {
        Vec2::from(self.platform_coupling_offsets[chain])
    }

    /// World position of the coupling joint of `chain` for platform pose `x`.
    #[inline]
    pub fn coupling_point(&self, chain: usize, x: &Vector3<f64>) -> Vec2 {
        Vec2::new(x.x, x.y) + rotate(x.z, &self.offset(chain))
    }

    /// `d C_i / d x`, a 2x3 matrix.
    #[inline]
    pub fn coupling_point_jacobian(&self, chain: usize, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let r = perp(&rotate(x.z, &self.offset(chain)));
        Matrix2x3::new(1.0, 0.0, r.x, 0.0, 1.0, r.y)
    }

    /// Centroid of the base joints.
    pub fn base_centroid(&self) -> Vec2 {
        (0..3).map(|i| self.base(i)).sum::<Vec2>() / 3.0
    }
}

/// Platform pose `(px, py, phi)` with `phi` wrapped to `(-pi, pi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformPose {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl PlatformPose {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi: wrap_angle(phi) }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.phi)
    }
}

/// Elbow assembly mode of one chain: sign of the passive angle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elbow {
    Positive,
    Negative,
}

impl Elbow {
    pub fn sign(self) -> f64 {
        match self {
            Elbow::Positive => 1.0,
            Elbow::Negative => -1.0,
        }
    }
}

/// Assembly mode of the whole robot, one elbow per chain.
pub type Branch = [Elbow; 3];

pub const DEFAULT_BRANCH: Branch = [Elbow::Positive; 3];

/// Joint angles of one leg chain [rad].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainAngles {
    pub active: f64,
    pub passive: f64,
    pub coupling: f64,
}

/// Full joint vector, chains in order 1, 2, 3.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointVector {
    pub chains: [ChainAngles; 3],
}

impl JointVector {
    pub fn active(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.chains[i].active)
    }

    pub fn passive(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.chains[i].passive)
    }

    pub fn coupling(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.chains[i].coupling)
    }

    /// Stacked as `[q_1; q_2; q_3]`, each chain ordered (active, passive, coupling).
    pub fn stacked(&self) -> Vector9 {
        Vector9::from_fn(|r, _| {
            let c = &self.chains[r / 3];
            match r % 3 {
                0 => c.active,
                1 => c.passive,
                _ => c.coupling,
            }
        })
    }

    pub fn from_stacked(v: &Vector9) -> Self {
        let chain = |i: usize| ChainAngles { active: v[3 * i], passive: v[3 * i + 1], coupling: v[3 * i + 2] };
        Self { chains: [chain(0), chain(1), chain(2)] }
    }

    /// Elbow position of `chain`.
    pub fn elbow(&self, g: &RobotGeometry, chain: usize) -> Vec2 {
        g.base(chain) + g.link1_lengths[chain] * unit(self.chains[chain].active)
    }

    /// Distal end of `chain` computed through the chain (not through the platform).
    pub fn chain_end(&self, g: &RobotGeometry, chain: usize) -> Vec2 {
        let c = &self.chains[chain];
        self.elbow(g, chain) + g.link2_lengths[chain] * unit(c.active + c.passive)
    }
}

/// Velocity mappings of the closed chains.
#[derive(Clone, Copy, Debug)]
pub struct KinematicJacobians {
    /// Maps platform velocity to the stacked joint velocity.
    pub j_qx: Matrix9x3,
    /// Maps active joint velocity to platform velocity.
    pub j_xqa: Matrix3<f64>,
}

impl KinematicJacobians {
    /// Rows of `j_qx` belonging to the active joints; the inverse of `j_xqa`.
    pub fn j_qax(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.j_qx[(3 * r, c)])
    }

    /// Row of `j_qx` for joint `k` (0 active, 1 passive, 2 coupling) of `chain`.
    pub fn joint_row(&self, chain: usize, k: usize) -> nalgebra::RowVector3<f64> {
        self.j_qx.fixed_view::<1, 3>(3 * chain + k, 0).into_owned()
    }
}

/// Loop-closure residual, two rows per chain: chain end minus coupling point.
pub fn full_constraints(q: &JointVector, x: &PlatformPose, g: &RobotGeometry) -> Vector6<f64> {
    let xv = x.to_vector();
    let mut r = Vector6::zeros();
    for i in 0..3 {
        let d = q.chain_end(g, i) - g.coupling_point(i, &xv);
        r[2 * i] = d.x;
        r[2 * i + 1] = d.y;
    }
    r
}

/// Orientation closure of each chain, `q_a + q_p + q_c - phi` wrapped.
pub fn orientation_constraints(q: &JointVector, x: &PlatformPose) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        let c = &q.chains[i];
        wrap_angle(c.active + c.passive + c.coupling - x.phi)
    })
}

/// Passive-angle-free residual: elbow-to-coupling distance minus the distal length.
pub fn reduced_constraints(q_a: &Vector3<f64>, x: &PlatformPose, g: &RobotGeometry) -> Vector3<f64> {
    reduced_residual(q_a, &x.to_vector(), g)
}

fn reduced_residual(q_a: &Vector3<f64>, x: &Vector3<f64>, g: &RobotGeometry) -> Vector3<f64> {
    Vector3::from_fn(|i, _| {
        let elbow = g.base(i) + g.link1_lengths[i] * unit(q_a[i]);
        (g.coupling_point(i, x) - elbow).norm() - g.link2_lengths[i]
    })
}

/// Gradients of the reduced constraints: `(d/dx, diag d/dq_a)`.
fn reduced_gradients(q_a: &Vector3<f64>, x: &Vector3<f64>, g: &RobotGeometry) -> (Matrix3<f64>, Vector3<f64>) {
    let mut dx = Matrix3::zeros();
    let mut dqa = Vector3::zeros();
    for i in 0..3 {
        let elbow = g.base(i) + g.link1_lengths[i] * unit(q_a[i]);
        let v = g.coupling_point(i, x) - elbow;
        let n = v / v.norm();
        let row = n.transpose() * g.coupling_point_jacobian(i, x);
        dx.set_row(i, &row);
        dqa[i] = -g.link1_lengths[i] * n.dot(&unit_perp(q_a[i]));
    }
    (dx, dqa)
}

/// Analytic inverse kinematics for the given assembly mode.
pub fn inverse_kinematics(x: &PlatformPose, g: &RobotGeometry, branch: &Branch) -> Result<JointVector> {
    ik_vec(&x.to_vector(), g, branch)
}

pub(crate) fn ik_vec(x: &Vector3<f64>, g: &RobotGeometry, branch: &Branch) -> Result<JointVector> {
    let mut q = JointVector::default();
    for i in 0..3 {
        let (l1, l2) = (g.link1_lengths[i], g.link2_lengths[i]);
        let d = g.coupling_point(i, x) - g.base(i);
        let dist = d.norm();
        let cos_p = (dist * dist - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos_p) {
            return Err(Error::Unreachable { chain: i + 1, distance: dist });
        }
        let passive = branch[i].sign() * cos_p.clamp(-1.0, 1.0).acos();
        let active = d.y.atan2(d.x) - (l2 * passive.sin()).atan2(l1 + l2 * passive.cos());
        let active = wrap_angle(active);
        q.chains[i] = ChainAngles { active, passive, coupling: wrap_angle(x.z - active - passive) };
    }
    Ok(q)
}

/// Result of the Newton forward-kinematics solve.
#[derive(Clone, Copy, Debug)]
pub struct FkSolution {
    pub pose: PlatformPose,
    pub iterations: usize,
    pub residual: f64,
}

/// Newton-Raphson forward kinematics on the reduced constraints, seeded by `x_init`.
pub fn forward_kinematics(q_a: &Vector3<f64>, x_init: &PlatformPose, g: &RobotGeometry) -> Result<FkSolution> {
    let mut x = x_init.to_vector();
    let mut residual = f64::INFINITY;
    for it in 0..=FK_MAX_ITERATIONS {
        let r = reduced_residual(q_a, &x, g);
        residual = r.amax();
        if !residual.is_finite() {
            break;
        }
        if residual < FK_TOLERANCE {
            return Ok(FkSolution { pose: PlatformPose::from_vector(&x), iterations: it, residual });
        }
        if it == FK_MAX_ITERATIONS {
            break;
        }
        let (a, _) = reduced_gradients(q_a, &x, g);
        if hadamard_ratio(&a) < 1e-10 {
            return Err(Error::SingularJacobian);
        }
        let mut step = a.lu().solve(&(-r)).ok_or(Error::SingularJacobian)?;
        let trans = step.fixed_rows::<2>(0).norm();
        let scale = (FK_MAX_ANGLE_STEP / step.z.abs())
            .min(FK_MAX_TRANSLATION_STEP / trans)
            .min(1.0);
        step *= scale;
        x += step;
    }
    Err(Error::NoConvergence { iterations: FK_MAX_ITERATIONS, residual })
}

/// `|det A| / prod ||row_i||`, a scale-free singularity measure in `[0, 1]`.
fn hadamard_ratio(a: &Matrix3<f64>) -> f64 {
    let rows: f64 = (0..3).map(|i| a.row(i).norm()).product();
    if rows == 0.0 {
        0.0
    } else {
        a.determinant().abs() / rows
    }
}

/// Gradients of the loop closure including the orientation rows, ordered per chain
/// as (x-closure, y-closure, orientation). Returns `(dRes/dq, dRes/dx)`.
pub fn constraint_gradients(q: &JointVector, x: &PlatformPose, g: &RobotGeometry) -> (Matrix9, Matrix9x3) {
    let xv = x.to_vector();
    let mut dq = Matrix9::zeros();
    let mut dx = Matrix9x3::zeros();
    for i in 0..3 {
        let c = &q.chains[i];
        let u1 = g.link1_lengths[i] * unit_perp(c.active);
        let u2 = g.link2_lengths[i] * unit_perp(c.active + c.passive);
        let o = 3 * i;
        for k in 0..2 {
            dq[(o + k, o)] = u1[k] + u2[k];
            dq[(o + k, o + 1)] = u2[k];
        }
        dq[(o + 2, o)] = 1.0;
        dq[(o + 2, o + 1)] = 1.0;
        dq[(o + 2, o + 2)] = 1.0;
        let jc = g.coupling_point_jacobian(i, &xv);
        for k in 0..2 {
            for j in 0..3 {
                dx[(o + k, j)] = -jc[(k, j)];
            }
        }
        dx[(o + 2, 2)] = -1.0;
    }
    (dq, dx)
}

/// Both velocity Jacobians at a consistent configuration.
pub fn jacobians(q: &JointVector, x: &PlatformPose, g: &RobotGeometry) -> Result<KinematicJacobians> {
    for i in 0..3 {
        let det = g.link1_lengths[i] * g.link2_lengths[i] * q.chains[i].passive.sin();
        if det.abs() < 1e-9 {
            return Err(Error::Singular(format!("chain {} is stretched or folded", i + 1)));
        }
    }
    let (dq, dx) = constraint_gradients(q, x, g);
    let j_qx = -dq
        .lu()
        .solve(&dx)
        .ok_or_else(|| Error::Singular("loop-closure gradient is not invertible".into()))?;

    let (a, b) = reduced_gradients(&q.active(), &x.to_vector(), g);
    if hadamard_ratio(&a) < 1e-9 {
        return Err(Error::Singular("platform gains uncontrolled mobility".into()));
    }
    if b.iter().any(|v| v.abs() < 1e-9) {
        return Err(Error::Singular("active joint cannot move the platform".into()));
    }
    let a_inv = a.try_inverse().ok_or_else(|| Error::Singular("reduced gradient".into()))?;
    let j_xqa = -a_inv * Matrix3::from_diagonal(&b);
    Ok(KinematicJacobians { j_qx, j_xqa })
}

/// Which link of a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// The actuated link attached to the base.
    Proximal,
    /// The link attached to the platform.
    Distal,
}

impl Link {
    /// 1 for the proximal link, 2 for the distal one.
    pub fn number(self) -> usize {
        match self {
            Link::Proximal => 1,
            Link::Distal => 2,
        }
    }
}

/// A point on the robot and its velocity Jacobian with respect to the platform pose.
#[derive(Clone, Copy, Debug)]
pub struct ContactPoint {
    pub position: Vec2,
    pub jacobian: Matrix2x3<f64>,
}

/// Point at fraction `s` along a link and its 2x3 Jacobian `dP/dx`.
pub fn link_point(
    q: &JointVector,
    x: &PlatformPose,
    g: &RobotGeometry,
    chain: usize,
    link: Link,
    s: f64,
) -> Result<ContactPoint> {
    let jac = jacobians(q, x, g)?;
    Ok(link_point_with(q, g, &jac, chain, link, s))
}

/// [`link_point`] with precomputed Jacobians.
pub fn link_point_with(
    q: &JointVector,
    g: &RobotGeometry,
    jac: &KinematicJacobians,
    chain: usize,
    link: Link,
    s: f64,
) -> ContactPoint {
    let c = &q.chains[chain];
    let (l1, l2) = (g.link1_lengths[chain], g.link2_lengths[chain]);
    let ja = jac.joint_row(chain, 0);
    let jp = jac.joint_row(chain, 1);
    match link {
        Link::Proximal => ContactPoint {
            position: g.base(chain) + s * l1 * unit(c.active),
            jacobian: (s * l1 * unit_perp(c.active)) * ja,
        },
        Link::Distal => {
            let abs = c.active + c.passive;
            ContactPoint {
                position: q.elbow(g, chain) + s * l2 * unit(abs),
                jacobian: (l1 * unit_perp(c.active)) * ja + (s * l2 * unit_perp(abs)) * (ja + jp),
            }
        }
    }
}

/// Point fixed on the platform at `offset` (platform frame).
pub fn platform_point(x: &PlatformPose, offset: &Vec2) -> ContactPoint {
    let r = rotate(x.phi, offset);
    let rp = perp(&r);
    ContactPoint {
        position: Vec2::new(x.x, x.y) + r,
        jacobian: Matrix2x3::new(1.0, 0.0, rp.x, 0.0, 1.0, rp.y),
    }
}

/// Interior angle between the two links of `chain` at the elbow, `pi - |q_p|`.
pub fn clamp_angle(q: &JointVector, chain: usize) -> f64 {
    PI - q.chains[chain].passive.abs()
}

/// Gradient of [`clamp_angle`] with respect to the platform pose.
pub fn clamp_angle_gradient(q: &JointVector, jac: &KinematicJacobians, chain: usize) -> Vector3<f64> {
    let sign = q.chains[chain].passive.signum();
    -(sign * jac.joint_row(chain, 1)).transpose()
}
