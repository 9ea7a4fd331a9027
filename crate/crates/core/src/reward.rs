//! Reward shaping for falling policies.
//!
//! The reward balances four groups: impact softness (component contact
//! forces and root acceleration), end-pose tracking (root orientation and
//! joint positions, faded in over a blending window), regularization
//! (torques, joint accelerations, and action smoothness), and a constant
//! positive offset. Term values stay unweighted until [`total_reward`]
//! applies the configured weights, so sweeps over weight settings can reuse
//! recorded term values without re-simulating.

use nalgebra::{UnitQuaternion, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use crate::dynamics::{ContactReport, SimState};
use crate::model::RobotModel;

/// Weights and shaping constants for every reward term.
///
/// `contact_clip` caps the per-component contact force magnitude during
/// training only; `t_blend` is the tracking fade-in duration in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeights {
    pub contact: f64,
    pub root_acc: f64,
    pub root_orientation: f64,
    pub joint_positions: f64,
    pub torques: f64,
    pub joint_acc: f64,
    pub action_rate: f64,
    pub action_acc: f64,
    pub offset: f64,
    /// Contact force clip in newtons, applied in training mode only.
    pub contact_clip: f64,
    /// Tracking blend duration in seconds.
    pub t_blend: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            contact: 200.0,
            root_acc: 0.2,
            root_orientation: 20.0,
            joint_positions: 1.0,
            torques: 1e-3,
            joint_acc: 7.5e-7,
            action_rate: 0.1,
            action_acc: 0.05,
            offset: 50.0,
            contact_clip: 1e4,
            t_blend: 2.0,
        }
    }
}

/// Invalid reward configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightError {
    /// A weight or constant is negative or non-finite.
    BadWeight { name: &'static str },
    /// The blend duration must be positive.
    NonPositiveBlend,
}

impl core::fmt::Display for WeightError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            WeightError::BadWeight { name } => {
                write!(f, "reward weight `{name}` must be finite and non-negative")
            }
            WeightError::NonPositiveBlend => write!(f, "blend duration must be positive"),
        }
    }
}

impl RewardWeights {
    /// Checks that all weights are finite and non-negative and the blend
    /// duration is positive.
    pub fn validate(&self) -> Result<(), WeightError> {
        let named = [
            ("contact", self.contact),
            ("root_acc", self.root_acc),
            ("root_orientation", self.root_orientation),
            ("joint_positions", self.joint_positions),
            ("torques", self.torques),
            ("joint_acc", self.joint_acc),
            ("action_rate", self.action_rate),
            ("action_acc", self.action_acc),
            ("offset", self.offset),
            ("contact_clip", self.contact_clip),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(WeightError::BadWeight { name });
            }
        }
        if !(self.t_blend > 0.0) || !self.t_blend.is_finite() {
            return Err(WeightError::NonPositiveBlend);
        }
        Ok(())
    }
}

/// Unweighted values of all penalty terms; every field is ≤ 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardTerms {
    pub contact: f64,
    pub root_acc: f64,
    pub root_orientation: f64,
    pub joint_positions: f64,
    pub torques: f64,
    pub joint_acc: f64,
    pub action_rate: f64,
    pub action_acc: f64,
}

/// Weighted per-term contributions plus their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub contact: f64,
    pub root_acc: f64,
    pub root_orientation: f64,
    pub joint_positions: f64,
    pub torques: f64,
    pub joint_acc: f64,
    pub action_rate: f64,
    pub action_acc: f64,
    pub offset: f64,
    pub total: f64,
}

/// Last two actions, used by the smoothness penalties. Seeding both slots
/// with the initial joint positions avoids a spurious rate penalty on the
/// first control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionHistory {
    prev: Vec<f64>,
    prev2: Vec<f64>,
}

impl ActionHistory {
    pub fn new(initial: &[f64]) -> Self {
        Self {
            prev: initial.to_vec(),
            prev2: initial.to_vec(),
        }
    }

    /// Records `action` as the most recent entry.
    pub fn advance(&mut self, action: &[f64]) {
        core::mem::swap(&mut self.prev, &mut self.prev2);
        self.prev.clear();
        self.prev.extend_from_slice(action);
    }

    pub fn prev(&self) -> &[f64] {
        &self.prev
    }

    pub fn prev2(&self) -> &[f64] {
        &self.prev2
    }
}

/// Cubic fade-in from 0 at `t = 0` to 1 at `t = t_blend`, flat beyond. The
/// spline has zero slope at both ends, so the tracking terms switch on and
/// saturate without a kink.
pub fn blend(t: f64, t_blend: f64) -> f64 {
    debug_assert!(t_blend > 0.0);
    let s = (t / t_blend).clamp(0.0, 1.0);
    (-2.0 * s + 3.0) * s * s
}

/// Contact and root-acceleration penalties.
///
/// The contact term squares the largest force component (infinity norm) of
/// each robot component's summed contact force, scaled by that component's
/// sensitivity weight. In training mode the force is clipped before
/// weighting so outlier penalty-solver spikes cannot destabilize returns;
/// evaluation always sees unclipped forces.
pub fn impact_reward(
    model: &RobotModel,
    report: &ContactReport,
    state: &SimState,
    w: &RewardWeights,
    training: bool,
) -> (f64, f64) {
    let mut contact = 0.0;
    for (component, force) in model.components().iter().zip(&report.component_forces) {
        let mut magnitude = force.amax();
        if training {
            magnitude = magnitude.min(w.contact_clip);
        }
        let scaled = component.weight * magnitude;
        contact -= scaled * scaled;
    }
    let root_acc = -state.root_lin_acc.norm_squared();
    (contact, root_acc)
}

/// Orientation and joint tracking penalties, faded in by [`blend`].
///
/// The orientation term compares the world up direction expressed in each
/// body frame, which makes it invariant to the yaw of both poses; the goal
/// is expected to be expressed in the episode's path frame already.
pub fn tracking_reward(
    state: &SimState,
    goal_orientation: &UnitQuaternion<f64>,
    goal_joints: &[f64],
    t: f64,
    w: &RewardWeights,
) -> (f64, f64) {
    let u = blend(t, w.t_blend);
    let up_body = state
        .pose
        .root_orientation
        .inverse_transform_vector(&Vector3::z());
    let up_goal = goal_orientation.inverse_transform_vector(&Vector3::z());
    let orientation = -u * (up_body - up_goal).norm_squared();
    let joint_err: f64 = state
        .pose
        .joints
        .iter()
        .zip(goal_joints)
        .map(|(q, g)| (q - g) * (q - g))
        .sum();
    (orientation, -u * joint_err)
}

/// Torque, joint-acceleration, action-rate, and action-acceleration
/// penalties. Torques are the substep-averaged actuator torques from the
/// contact report; `action` is the setpoint vector commanded this step.
pub fn regularization_reward(
    report: &ContactReport,
    state: &SimState,
    action: &[f64],
    history: &ActionHistory,
) -> (f64, f64, f64, f64) {
    let torques = -report.torques.iter().map(|t| t * t).sum::<f64>();
    let joint_acc = -state.joint_acc.iter().map(|a| a * a).sum::<f64>();
    let rate = -action
        .iter()
        .zip(history.prev())
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>();
    let acc = -action
        .iter()
        .zip(history.prev())
        .zip(history.prev2())
        .map(|((a, p), pp)| {
            let d = a - 2.0 * p + pp;
            d * d
        })
        .sum::<f64>();
    (torques, joint_acc, rate, acc)
}

/// Applies the weights and adds the constant offset. Each breakdown field
/// is the weighted contribution, so the fields sum to `total` exactly.
pub fn total_reward(terms: &RewardTerms, w: &RewardWeights) -> RewardBreakdown {
    let contact = w.contact * terms.contact;
    let root_acc = w.root_acc * terms.root_acc;
    let root_orientation = w.root_orientation * terms.root_orientation;
    let joint_positions = w.joint_positions * terms.joint_positions;
    let torques = w.torques * terms.torques;
    let joint_acc = w.joint_acc * terms.joint_acc;
    let action_rate = w.action_rate * terms.action_rate;
    let action_acc = w.action_acc * terms.action_acc;
    let offset = w.offset;
    let total = contact
        + root_acc
        + root_orientation
        + joint_positions
        + torques
        + joint_acc
        + action_rate
        + action_acc
        + offset;
    RewardBreakdown {
        contact,
        root_acc,
        root_orientation,
        joint_positions,
        torques,
        joint_acc,
        action_rate,
        action_acc,
        offset,
        total,
    }
}
