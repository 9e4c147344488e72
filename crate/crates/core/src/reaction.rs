//! Uncertainty gate between classification and reaction.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::classifier::Prediction;
use crate::contact::ContactKind;
use crate::controller::{self, ControlMode, ModeKind};
use crate::error::{Error, Result};
use crate::kinematics::{KinematicJacobians, JointVector};
use crate::observer::DEFAULT_THRESHOLDS;

/// Gate threshold and detection thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactionPolicy {
    /// A reaction is executed only when the class probability is strictly above this.
    pub p_th: f64,
    /// Detection thresholds `(F_x [N], F_y [N], M_z [Nm])`.
    pub thresholds: [f64; 3],
}

impl Default for ReactionPolicy {
    fn default() -> Self {
        Self { p_th: 0.75, thresholds: DEFAULT_THRESHOLDS }
    }
}

impl ReactionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.p_th) {
            return Err(Error::Config(format!("p_th must lie in [0.5, 1), got {}", self.p_th)));
        }
        if self.thresholds.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("detection thresholds must be > 0".into()));
        }
        Ok(())
    }
}

/// The reaction a class calls for when the classifier is trusted.
pub fn optimal_reaction(class: ContactKind) -> ModeKind {
    match class {
        ContactKind::Collision => ModeKind::Retraction,
        ContactKind::Clamping => ModeKind::StructureOpening,
    }
}

/// Gate rule: nominal without detection, zero-g unless `p > p_th`, otherwise
/// the reaction of the predicted class.
pub fn select_reaction(detected: bool, prediction: &Prediction, p_th: f64) -> ModeKind {
    if !detected {
        ModeKind::Nominal
    } else if prediction.p > p_th {
        optimal_reaction(prediction.class)
    } else {
        ModeKind::ZeroG
    }
}

/// Parameterises a gate decision. Retraction follows the estimated force;
/// opening acts on `chain`. A reaction whose direction is undefined falls back
/// to zero-g, and the reason is returned alongside.
pub fn realize(
    kind: ModeKind,
    f_hat: &Vector3<f64>,
    chain: usize,
    q: &JointVector,
    jac: &KinematicJacobians,
) -> (ControlMode, Option<Error>) {
    let r = match kind {
        ModeKind::Nominal => Ok(ControlMode::Nominal),
        ModeKind::ZeroG => Ok(ControlMode::ZeroG),
        ModeKind::Retraction => controller::retraction_command(f_hat),
        ModeKind::StructureOpening => controller::structure_opening_command(chain, q, jac),
    };
    match r {
        Ok(m) => (m, None),
        Err(e) => (ControlMode::ZeroG, Some(e)),
    }
}

/// Averages class probabilities over a fixed number of samples before the gate
/// decides, so a single outlier sample cannot switch the mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GateHold {
    window: usize,
    sum: [f64; 2],
    count: usize,
}

impl GateHold {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), sum: [0.0; 2], count: 0 }
    }

    /// Adds one sample; returns the window prediction once the window is full.
    pub fn push(&mut self, probs: [f64; 2]) -> Option<Prediction> {
        if self.count >= self.window {
            return None;
        }
        self.sum[0] += probs[0];
        self.sum[1] += probs[1];
        self.count += 1;
        (self.count == self.window).then(|| {
            let n = self.window as f64;
            Prediction::from_probabilities([self.sum[0] / n, self.sum[1] / n])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(class: ContactKind, p: f64) -> Prediction {
        Prediction { class, p }
    }

    #[test]
    fn rule_table() {
        assert_eq!(select_reaction(true, &pred(ContactKind::Clamping, 0.8), 0.75), ModeKind::StructureOpening);
        assert_eq!(select_reaction(true, &pred(ContactKind::Collision, 0.8), 0.75), ModeKind::Retraction);
        assert_eq!(select_reaction(true, &pred(ContactKind::Collision, 0.6), 0.75), ModeKind::ZeroG);
        assert_eq!(select_reaction(true, &pred(ContactKind::Clamping, 0.75), 0.75), ModeKind::ZeroG);
        assert_eq!(select_reaction(false, &pred(ContactKind::Clamping, 0.99), 0.5), ModeKind::Nominal);
    }

    #[test]
    fn hold_averages_window() {
        let mut h = GateHold::new(4);
        assert!(h.push([0.9, 0.1]).is_none());
        assert!(h.push([0.2, 0.8]).is_none());
        assert!(h.push([0.3, 0.7]).is_none());
        let p = h.push([0.2, 0.8]).unwrap();
        assert_eq!(p.class, ContactKind::Clamping);
        assert!((p.p - 0.6).abs() < 1e-15);
        assert!(h.push([1.0, 0.0]).is_none());
    }

    #[test]
    fn policy_bounds() {
        assert!(ReactionPolicy::default().validate().is_ok());
        assert!(ReactionPolicy { p_th: 1.0, ..Default::default() }.validate().is_err());
        assert!(ReactionPolicy { p_th: 0.49, ..Default::default() }.validate().is_err());
    }
}
