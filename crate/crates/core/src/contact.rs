//! Synthetic collision and clamping contacts.
//!
//! A collision is a half-sine force pulse at a point on a link or the platform.
//! The collided body stays where it was hit, so if the robot keeps pushing into
//! it a unilateral spring adds to the pulse. A clamping contact is a limb caught
//! between the two links of a chain near the elbow; it is a unilateral spring
//! on the gap between the links.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::NominalTrajectory;
use crate::dynamics::{RobotModel, RobotState};
use crate::error::{Error, Result};
use crate::kinematics::{self, ContactPoint, KinematicJacobians, Link, Vec2};
use crate::observer::{DEFAULT_GAIN, DEFAULT_THRESHOLDS};

/// Ground-truth contact type; also the classifier's output classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactKind {
    Collision,
    Clamping,
}

impl ContactKind {
    /// Class index: 0 collision, 1 clamping.
    pub fn index(self) -> usize {
        match self {
            ContactKind::Collision => 0,
            ContactKind::Clamping => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ContactKind::Collision),
            1 => Some(ContactKind::Clamping),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContactKind::Collision => "collision",
            ContactKind::Clamping => "clamping",
        }
    }

    pub fn other(self) -> Self {
        match self {
            ContactKind::Collision => ContactKind::Clamping,
            ContactKind::Clamping => ContactKind::Collision,
        }
    }
}

/// Where on the robot a contact acts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContactSite {
    /// Fraction `s` along a link of a chain (0-based chain index).
    Link { chain: usize, link: Link, s: f64 },
    /// Point fixed in the platform frame [m].
    Platform { offset: [f64; 2] },
}

impl ContactSite {
    /// 1-based chain number, 0 for the platform.
    pub fn chain_number(&self) -> usize {
        match self {
            ContactSite::Link { chain, .. } => chain + 1,
            ContactSite::Platform { .. } => 0,
        }
    }

    /// 1 or 2 for links, 0 for the platform.
    pub fn link_number(&self) -> usize {
        match self {
            ContactSite::Link { link, .. } => link.number(),
            ContactSite::Platform { .. } => 0,
        }
    }

    pub fn point(&self, state: &RobotState, model: &RobotModel, jac: &KinematicJacobians) -> ContactPoint {
        match *self {
            ContactSite::Link { chain, link, s } => {
                kinematics::link_point_with(&state.q, &model.geometry, jac, chain, link, s)
            }
            ContactSite::Platform { offset } => kinematics::platform_point(&state.pose(), &Vec2::from(offset)),
        }
    }
}

/// Transient pulse plus the stiffness of the collided body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionProfile {
    /// [s]
    pub onset: f64,
    /// [s]
    pub duration: f64,
    /// Stiffness of the collided body against further penetration [N/m].
    pub body_stiffness: f64,
}

/// Limb caught in the elbow of a chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampProfile {
    /// Limb stiffness [N/m].
    pub stiffness: f64,
    /// Distance of the limb from the elbow along both links [m].
    pub limb_offset: f64,
    /// Unloaded limb thickness: the gap at which contact begins [m].
    pub limb_width: f64,
}

/// Ground-truth description of one contact episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactScenario {
    /// Archetype index within its sampled set.
    pub archetype: usize,
    pub kind: ContactKind,
    pub site: ContactSite,
    /// Unit direction of the collision force on the robot (unused for clamping).
    pub direction: [f64; 2],
    /// Peak force [N].
    pub magnitude: f64,
    pub collision: Option<CollisionProfile>,
    pub clamp: Option<ClampProfile>,
    /// Index of the starting platform pose.
    pub config_id: usize,
    pub start_pose: [f64; 3],
    /// Nominal motion that leads into the contact.
    pub approach_velocity: [f64; 3],
    pub approach_start: f64,
    pub approach_duration: f64,
    /// Episode length [s].
    pub duration: f64,
    /// Projected peak wrench reaches the detectability floor.
    pub detectable: bool,
}

impl ContactScenario {
    pub fn nominal_trajectory(&self) -> NominalTrajectory {
        NominalTrajectory {
            origin: Vector3::from(self.start_pose),
            velocity: Vector3::from(self.approach_velocity),
            start: self.approach_start,
            duration: self.approach_duration,
        }
    }

    /// Chain whose structure opening is executed for this contact: the clamped
    /// chain, the collided chain, or for platform contacts the chain whose coupling
    /// joint is nearest to the contact point.
    pub fn reaction_chain(&self, model: &RobotModel) -> usize {
        match self.site {
            ContactSite::Link { chain, .. } => chain,
            ContactSite::Platform { offset } => {
                let o = Vec2::from(offset);
                (0..3)
                    .min_by(|&a, &b| {
                        let da = (model.geometry.offset(a) - o).norm();
                        let db = (model.geometry.offset(b) - o).norm();
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0)
            }
        }
    }

    /// Same scenario without any contact (used for contact-free tracking checks).
    pub fn without_contact(&self) -> Self {
        let mut s = self.clone();
        s.magnitude = 0.0;
        if let Some(c) = s.collision.as_mut() {
            c.onset = f64::INFINITY;
        }
        if let Some(c) = s.clamp.as_mut() {
            c.limb_width = 0.0;
        }
        s
    }
}

/// True contact at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactState {
    pub active: bool,
    /// Contact wrench mapped to platform coordinates.
    pub wrench: Vector3<f64>,
    /// Magnitude of the contact force at the contact point [N].
    pub force: f64,
    pub point: Vec2,
    /// Clamp gap [m]; infinite for collisions.
    pub gap: f64,
}

impl ContactState {
    pub fn inactive(point: Vec2) -> Self {
        Self { active: false, wrench: Vector3::zeros(), force: 0.0, point, gap: f64::INFINITY }
    }
}

/// Half-sine pulse value at time `t`.
pub fn pulse(t: f64, onset: f64, duration: f64, peak: f64) -> f64 {
    if t < onset || t > onset + duration {
        0.0
    } else {
        peak * (PI * (t - onset) / duration).sin()
    }
}

/// Collision wrench on the platform. `anchor` is the contact point position at
/// onset. The impact pulse acts only inside its window. The struck body stays
/// where it was hit, so pressing into it past `anchor` loads the body spring
/// at any later time; inside the window yielding away also relieves the pulse.
pub fn collision_wrench(
    t: f64,
    scenario: &ContactScenario,
    point: &ContactPoint,
    anchor: Option<&Vec2>,
) -> ContactState {
    let Some(profile) = scenario.collision else {
        return ContactState::inactive(point.position);
    };
    if t < profile.onset {
        return ContactState::inactive(point.position);
    }
    let d = Vec2::from(scenario.direction);
    let penetration = anchor.map_or(0.0, |a| -d.dot(&(point.position - a)));
    let magnitude = if t <= profile.onset + profile.duration {
        (pulse(t, profile.onset, profile.duration, scenario.magnitude) + profile.body_stiffness * penetration).max(0.0)
    } else {
        profile.body_stiffness * penetration.max(0.0)
    };
    let f = magnitude * d;
    ContactState {
        active: magnitude > 0.0,
        wrench: point.jacobian.transpose() * f,
        force: magnitude,
        point: point.position,
        gap: f64::INFINITY,
    }
}

/// Points where a limb at `offset` from the elbow touches the two links.
struct ClampGeometry {
    proximal: ContactPoint,
    distal: ContactPoint,
    /// Unit vector from the distal to the proximal contact point.
    axis: Vec2,
    gap: f64,
}

fn clamp_geometry(
    chain: usize,
    profile: &ClampProfile,
    state: &RobotState,
    model: &RobotModel,
    jac: &KinematicJacobians,
) -> Option<ClampGeometry> {
    let g = &model.geometry;
    let (l1, l2) = (g.link1_lengths[chain], g.link2_lengths[chain]);
    let proximal = kinematics::link_point_with(&state.q, g, jac, chain, Link::Proximal, 1.0 - profile.limb_offset / l1);
    let distal = kinematics::link_point_with(&state.q, g, jac, chain, Link::Distal, profile.limb_offset / l2);
    let d = proximal.position - distal.position;
    let gap = d.norm();
    let axis = d.try_normalize(1e-12)?;
    Some(ClampGeometry { proximal, distal, axis, gap })
}

/// Clamping wrench on the platform from the limb spring in the elbow of the clamped chain.
pub fn clamping_wrench(
    scenario: &ContactScenario,
    state: &RobotState,
    model: &RobotModel,
    jac: &KinematicJacobians,
) -> ContactState {
    let (Some(profile), ContactSite::Link { chain, .. }) = (scenario.clamp, scenario.site) else {
        return ContactState::inactive(Vec2::zeros());
    };
    let elbow = state.q.elbow(&model.geometry, chain);
    let Some(cg) = clamp_geometry(chain, &profile, state, model, jac) else {
        return ContactState::inactive(elbow);
    };
    let penetration = (profile.limb_width - cg.gap).max(0.0);
    let f = profile.stiffness * penetration;
    // equal and opposite squeeze forces: the gradient of the limb spring energy
    let wrench = (cg.proximal.jacobian - cg.distal.jacobian).transpose() * (f * cg.axis);
    ContactState { active: f > 0.0, wrench, force: f, point: elbow, gap: cg.gap }
}

/// Per-episode contact evaluation. For collisions it remembers where the body
/// was struck and how far the impact pushed the contact point; the body stays
/// at that furthest position once the pulse is over.
#[derive(Clone, Debug)]
pub struct ContactTracker {
    scenario: ContactScenario,
    anchor: Option<Vec2>,
    excursion: f64,
}

impl ContactTracker {
    pub fn new(scenario: ContactScenario) -> Self {
        Self { scenario, anchor: None, excursion: 0.0 }
    }

    pub fn scenario(&self) -> &ContactScenario {
        &self.scenario
    }

    pub fn evaluate(&mut self, t: f64, state: &RobotState, model: &RobotModel, jac: &KinematicJacobians) -> ContactState {
        match self.scenario.kind {
            ContactKind::Collision => {
                let point = self.scenario.site.point(state, model, jac);
                let Some(profile) = self.scenario.collision else {
                    return ContactState::inactive(point.position);
                };
                if t < profile.onset {
                    return ContactState::inactive(point.position);
                }
                let d = Vec2::from(self.scenario.direction);
                let a = *self.anchor.get_or_insert(point.position);
                let surface = if t <= profile.onset + profile.duration {
                    self.excursion = self.excursion.max(d.dot(&(point.position - a)));
                    a
                } else {
                    a + self.excursion * d
                };
                collision_wrench(t, &self.scenario, &point, Some(&surface))
            }
            ContactKind::Clamping => clamping_wrench(&self.scenario, state, model, jac),
        }
    }
}

/// Randomisation ranges of the scenario generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Starting platform poses `(px [m], py [m], phi [rad])`, one per joint configuration.
    pub configurations: Vec<[f64; 3]>,
    /// Collision peak force range [N].
    pub collision_peak: [f64; 2],
    /// Collision pulse duration range [s].
    pub collision_duration: [f64; 2],
    /// Collision onset range [s].
    pub collision_onset: [f64; 2],
    /// Contact location range along a link (fraction from its proximal joint).
    pub collision_location: [f64; 2],
    /// Largest deviation of the collision direction from the link normal [rad].
    pub collision_direction_spread: f64,
    /// Stiffness of a collided body [N/m].
    pub body_stiffness: f64,
    /// Speed at which the nominal motion drives the contact point into the body [m/s].
    pub approach_speed: [f64; 2],
    /// How long the approach continues after the collision onset [s].
    pub approach_after_onset: f64,
    /// Clamping target force range [N].
    pub clamp_peak: [f64; 2],
    /// Limb stiffness [N/m].
    pub clamp_stiffness: f64,
    /// Limb distance from the elbow [m].
    pub clamp_limb_offset: [f64; 2],
    /// Clamp-angle closure before the limb is touched [rad].
    pub clamp_contact_angle: [f64; 2],
    /// Clamp-angle closing rate of the nominal motion [rad/s].
    pub clamp_closing_rate: f64,
    /// Collision episode length [s].
    pub collision_episode: f64,
    /// Clamping episode length [s].
    pub clamping_episode: f64,
    /// A scenario is detectable when its projected peak wrench exceeds this
    /// multiple of a detection threshold on some axis.
    pub detectability_factor: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            configurations: vec![
                [0.0, 0.0, 0.0],
                [0.06, 0.0, 10f64.to_radians()],
                [-0.04, 0.04, (-15f64).to_radians()],
            ],
            collision_peak: [20.0, 60.0],
            collision_duration: [0.05, 0.15],
            collision_onset: [0.15, 0.35],
            collision_location: [0.3, 0.9],
            collision_direction_spread: 45f64.to_radians(),
            body_stiffness: 2000.0,
            approach_speed: [0.02, 0.05],
            approach_after_onset: 1.0,
            clamp_peak: [20.0, 60.0],
            clamp_stiffness: 2000.0,
            clamp_limb_offset: [0.1, 0.2],
            clamp_contact_angle: [0.02, 0.06],
            clamp_closing_rate: 0.2,
            collision_episode: 1.5,
            clamping_episode: 3.0,
            detectability_factor: 1.5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.configurations.is_empty() {
            return Err(Error::Config("at least one joint configuration is required".into()));
        }
        let ranges = [
            ("collision_peak", self.collision_peak),
            ("collision_duration", self.collision_duration),
            ("collision_onset", self.collision_onset),
            ("collision_location", self.collision_location),
            ("approach_speed", self.approach_speed),
            ("clamp_peak", self.clamp_peak),
            ("clamp_limb_offset", self.clamp_limb_offset),
            ("clamp_contact_angle", self.clamp_contact_angle),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!("{name} must be a positive range")));
            }
        }
        if self.collision_duration[0] < 0.03 || self.collision_duration[1] > 0.3 {
            return Err(Error::Config("collision_duration must lie within [0.03, 0.3] s".into()));
        }
        if self.collision_location[1] > 1.0 {
            return Err(Error::Config("collision_location must lie within (0, 1]".into()));
        }
        let positive = [
            self.body_stiffness,
            self.clamp_stiffness,
            self.clamp_closing_rate,
            self.collision_episode,
            self.clamping_episode,
            self.detectability_factor,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("stiffnesses, rates and episode lengths must be > 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Collision sites of one configuration: both links of every chain, then the platform.
fn collision_sites() -> Vec<Option<(usize, Link)>> {
    let mut v: Vec<_> = (0..3)
        .flat_map(|c| [Some((c, Link::Proximal)), Some((c, Link::Distal))])
        .collect();
    v.push(None);
    v
}

/// Largest projected wrench component relative to the detection thresholds.
fn detectability(wrench: &Vector3<f64>) -> f64 {
    (0..3).map(|i| wrench[i].abs() / DEFAULT_THRESHOLDS[i]).fold(0.0, f64::max)
}

const MAX_RESAMPLES: usize = 200;

/// Seven collisions and three clampings per joint configuration, in a fixed order.
///
/// `stiffness` is the impedance stiffness the robot will run with; clamping
/// approaches are sized with it so the limb reaches its target force.
pub fn sample_scenarios(
    model: &RobotModel,
    stiffness: &[f64; 3],
    config: &ScenarioConfig,
    seed: u64,
) -> Result<Vec<ContactScenario>> {
    config.validate()?;
    let stiffness = Vector3::from(*stiffness);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (config_id, pose) in config.configurations.iter().enumerate() {
        let start = model.state(Vector3::from(*pose), Vector3::zeros())?;
        let jac = model.jacobians(&start)?;
        for site in collision_sites() {
            let archetype = out.len();
            let mut scenario = sample_collision(model, config, &start, &jac, site, &mut rng);
            for _ in 0..MAX_RESAMPLES {
                if scenario.detectable {
                    break;
                }
                scenario = sample_collision(model, config, &start, &jac, site, &mut rng);
            }
            scenario.archetype = archetype;
            scenario.config_id = config_id;
            out.push(scenario);
        }
        for chain in 0..3 {
            let archetype = out.len();
            let mut scenario = sample_clamp(model, &stiffness, config, &start, &jac, chain, &mut rng);
            for _ in 0..MAX_RESAMPLES {
                if scenario.detectable {
                    break;
                }
                scenario = sample_clamp(model, &stiffness, config, &start, &jac, chain, &mut rng);
            }
            scenario.archetype = archetype;
            scenario.config_id = config_id;
            out.push(scenario);
        }
    }
    Ok(out)
}

fn rotate2(v: &Vec2, a: f64) -> Vec2 {
    let (s, c) = a.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

fn sample_collision(
    model: &RobotModel,
    config: &ScenarioConfig,
    start: &RobotState,
    jac: &KinematicJacobians,
    site: Option<(usize, Link)>,
    rng: &mut ChaCha8Rng,
) -> ContactScenario {
    let (site, base_dir) = match site {
        Some((chain, link)) => {
            let s = uniform(rng, config.collision_location);
            let site = ContactSite::Link { chain, link, s };
            let p0 = site.point(start, model, jac).position;
            let p1 = ContactSite::Link { chain, link, s: 0.0 }.point(start, model, jac).position;
            let along = (p0 - p1).normalize();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (site, sign * Vec2::new(-along.y, along.x))
        }
        None => {
            let a = rng.random_range(0.0..2.0 * PI);
            let r = model.geometry.offset(0).norm();
            let offset = [r * a.cos(), r * a.sin()];
            // pointing inwards from the rim
            (ContactSite::Platform { offset }, -Vec2::new(a.cos(), a.sin()))
        }
    };
    let spread = config.collision_direction_spread;
    let direction = rotate2(&base_dir, rng.random_range(-spread..=spread));
    let magnitude = uniform(rng, config.collision_peak);
    let duration = uniform(rng, config.collision_duration);
    let onset = uniform(rng, config.collision_onset);
    let speed = uniform(rng, config.approach_speed);

    let point = site.point(start, model, jac);
    let push = point.jacobian.transpose() * direction;
    let mut velocity = -speed * push / push.norm_squared().max(1e-12);
    let planar = velocity.fixed_rows::<2>(0).norm();
    if planar > 0.1 {
        velocity *= 0.1 / planar;
    }
    let projected = point.jacobian.transpose() * (magnitude * direction);
    ContactScenario {
        archetype: 0,
        kind: ContactKind::Collision,
        site,
        direction: [direction.x, direction.y],
        magnitude,
        collision: Some(CollisionProfile { onset, duration, body_stiffness: config.body_stiffness }),
        clamp: None,
        config_id: 0,
        start_pose: [start.x.x, start.x.y, start.x.z],
        approach_velocity: [velocity.x, velocity.y, velocity.z],
        approach_start: 0.0,
        approach_duration: onset + config.approach_after_onset,
        duration: config.collision_episode,
        detectable: detectability(&projected) * filtered_pulse_peak(DEFAULT_GAIN, duration)
            >= config.detectability_factor,
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_clamp(
    model: &RobotModel,
    stiffness: &Vector3<f64>,
    config: &ScenarioConfig,
    start: &RobotState,
    jac: &KinematicJacobians,
    chain: usize,
    rng: &mut ChaCha8Rng,
) -> ContactScenario {
    let limb_offset = uniform(rng, config.clamp_limb_offset);
    let contact_angle = uniform(rng, config.clamp_contact_angle);
    let magnitude = uniform(rng, config.clamp_peak);
    let alpha0 = kinematics::clamp_angle(&start.q, chain);
    let limb_width = 2.0 * limb_offset * ((alpha0 - contact_angle) / 2.0).sin();
    let profile = ClampProfile { stiffness: config.clamp_stiffness, limb_offset, limb_width };

    // Closing direction in platform coordinates and how fast the gap shrinks along it.
    let grad = kinematics::clamp_angle_gradient(&start.q, jac, chain);
    let closing = -grad.normalize();
    let gap_gradient = clamp_geometry(chain, &profile, start, model, jac)
        .map(|cg| (cg.proximal.jacobian - cg.distal.jacobian).transpose() * cg.axis)
        .unwrap_or_else(Vector3::zeros);
    let gamma = gap_gradient.dot(&closing).abs().max(1e-6);
    // Series springs: impedance along the closing direction, limb seen through the gap.
    let k_robot = closing.dot(&stiffness.component_mul(&closing));
    let k_limb = config.clamp_stiffness * gamma * gamma;
    let press = magnitude / (config.clamp_stiffness * gamma) * (k_robot + k_limb) / k_robot;
    let speed = config.clamp_closing_rate / grad.norm();
    let travel = contact_angle / grad.norm() + press;
    let velocity = speed * closing;

    ContactScenario {
        archetype: 0,
        kind: ContactKind::Clamping,
        site: ContactSite::Link { chain, link: Link::Distal, s: limb_offset / model.geometry.link2_lengths[chain] },
        direction: [0.0, 0.0],
        magnitude,
        collision: None,
        clamp: Some(profile),
        config_id: 0,
        start_pose: [start.x.x, start.x.y, start.x.z],
        approach_velocity: [velocity.x, velocity.y, velocity.z],
        approach_start: 0.0,
        approach_duration: travel / speed,
        duration: config.clamping_episode,
        // quasi-static: the platform carries `magnitude` times the gap gradient
        detectable: detectability(&(magnitude * gap_gradient)) >= config.detectability_factor,
    }
}

/// Peak of a first-order low-pass with bandwidth `gain` driven by a unit half-sine of length `duration`.
pub fn filtered_pulse_peak(gain: f64, duration: f64) -> f64 {
    let h = duration / 2000.0;
    let (mut y, mut peak, mut t) = (0.0f64, 0.0f64, 0.0);
    // the peak of the response occurs before the input has decayed for one time constant
    while t < duration + 5.0 / gain {
        let u = if t <= duration { (PI * t / duration).sin() } else { 0.0 };
        // exact step for a piecewise-constant input
        y = u + (y - u) * (-gain * h).exp();
        peak = peak.max(y);
        t += h;
    }
    peak
}
