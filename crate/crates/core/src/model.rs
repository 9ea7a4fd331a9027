//! Robot description: kinematic tree, mass properties, joint parameters,
//! collision spheres, and sensitivity-weighted components, plus the
//! kinematics / limit / self-collision queries built on top of them.
//!
//! Conventions:
//! - Bodies are stored in topological order; body 0 is the floating root and
//!   every other body's parent precedes it.
//! - Each non-root body is attached to its parent by a fixed frame offset
//!   (translation and rotation in the parent frame) followed, for articulated
//!   bodies, by a revolute joint rotating about an axis fixed in the child
//!   frame. Bodies without a joint are welded to their parent.
//! - Mass centers, inertia tensors (about the center of mass), sphere offsets,
//!   and joint axes are all expressed in the owning body's frame. Units are SI.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// A joint-space vector had the wrong length.
    DimensionMismatch { expected: usize, got: usize },
    NoBodies,
    /// Body 0 must be the unique parent-less root.
    RootNotFirst,
    ExtraRoot { body: usize },
    /// Parents must precede their children (tree, topological order).
    BadParent { body: usize },
    DuplicateBodyName { body: usize },
    /// Each joint must drive exactly one body.
    UnusedJoint { joint: usize },
    DuplicateJoint { joint: usize },
    JointOutOfRange { body: usize },
    BadJointLimits { joint: usize },
    /// A per-joint parameter (gain or limit) that must be positive was not.
    NonPositiveJointParam { joint: usize, what: &'static str },
    DefaultSetpointOutOfLimits { joint: usize },
    NonPositiveMass { body: usize },
    /// Inertia tensors must be symmetric positive-definite.
    BadInertia { body: usize },
    SphereBodyOutOfRange { sphere: usize },
    NonPositiveRadius { sphere: usize },
    NoComponents,
    DuplicateComponentName { component: usize },
    BadComponentWeight { component: usize },
    ComponentOutOfRange { body: usize },
    /// The default configuration must be free of self-collision.
    DefaultPoseCollides,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "joint vector length {got}, model has {expected} joints")
            }
            ModelError::NoBodies => write!(f, "model has no bodies"),
            ModelError::RootNotFirst => write!(f, "body 0 must be the root (no parent)"),
            ModelError::ExtraRoot { body } => write!(f, "body {body} has no parent but is not body 0"),
            ModelError::BadParent { body } => write!(f, "body {body} has a parent index >= its own"),
            ModelError::DuplicateBodyName { body } => write!(f, "body {body} reuses another body's name"),
            ModelError::UnusedJoint { joint } => write!(f, "joint {joint} drives no body"),
            ModelError::DuplicateJoint { joint } => write!(f, "joint {joint} drives more than one body"),
            ModelError::JointOutOfRange { body } => write!(f, "body {body} references a joint out of range"),
            ModelError::BadJointLimits { joint } => {
                write!(f, "joint {joint} lower limit must be below upper limit")
            }
            ModelError::NonPositiveJointParam { joint, what } => {
                write!(f, "joint {joint}: {what} must be positive")
            }
            ModelError::DefaultSetpointOutOfLimits { joint } => {
                write!(f, "joint {joint} default setpoint outside its limits")
            }
            ModelError::NonPositiveMass { body } => write!(f, "body {body} mass must be positive"),
            ModelError::BadInertia { body } => {
                write!(f, "body {body} inertia is not symmetric positive-definite")
            }
            ModelError::SphereBodyOutOfRange { sphere } => {
                write!(f, "collision sphere {sphere} references a body out of range")
            }
            ModelError::NonPositiveRadius { sphere } => {
                write!(f, "collision sphere {sphere} radius must be positive")
            }
            ModelError::NoComponents => write!(f, "model has no components"),
            ModelError::DuplicateComponentName { component } => {
                write!(f, "component {component} reuses another component's name")
            }
            ModelError::BadComponentWeight { component } => {
                write!(f, "component {component} weight must be finite and >= 0")
            }
            ModelError::ComponentOutOfRange { body } => {
                write!(f, "body {body} references a component out of range")
            }
            ModelError::DefaultPoseCollides => {
                write!(f, "default configuration is in self-collision")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// Revolute joint parameters. The joint rotates the child body about `axis`
/// (fixed in the child frame) relative to the child's attachment frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vector3<f64>>,
    /// Position limits, rad (closed interval).
    pub lower: f64,
    pub upper: f64,
    /// Velocity limit, rad/s.
    pub velocity_limit: f64,
    /// Torque limit, N·m.
    pub torque_limit: f64,
    /// Nominal PD gains.
    pub kp: f64,
    pub kd: f64,
    /// Default setpoint (reference configuration), rad.
    pub setpoint_default: f64,
}

/// One rigid body of the kinematic tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub name: String,
    /// Parent body index; `None` only for the root.
    pub parent: Option<usize>,
    /// Attachment frame origin in the parent frame, m.
    pub attach_translation: Vector3<f64>,
    /// Fixed rotation from the attachment frame to the parent frame.
    pub attach_rotation: UnitQuaternion<f64>,
    /// Index into the joint list; `None` for the root and for welded bodies.
    pub joint: Option<usize>,
    /// Mass, kg.
    pub mass: f64,
    /// Center of mass in the body frame, m.
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, body frame, kg·m².
    pub inertia: Matrix3<f64>,
    /// Index into the component list.
    pub component: usize,
}

/// Collision proxy sphere attached to a body.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSphere {
    pub body: usize,
    /// Center offset in the body frame, m.
    pub offset: Vector3<f64>,
    /// Radius, m.
    pub radius: f64,
}

/// Named body group with an impact-sensitivity weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: String,
    /// Sensitivity weight w >= 0 applied to the group's contact forces.
    pub weight: f64,
}

/// Root configuration plus joint angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    /// Root position, world frame, m.
    pub root_position: Vector3<f64>,
    /// Root orientation, world frame.
    pub root_orientation: UnitQuaternion<f64>,
    /// Joint angles, rad; one entry per joint.
    pub joints: Vec<f64>,
}

impl Pose {
    pub fn new(
        root_position: Vector3<f64>,
        root_orientation: UnitQuaternion<f64>,
        joints: Vec<f64>,
    ) -> Self {
        Pose {
            root_position,
            root_orientation,
            joints,
        }
    }
}

/// Validated robot description. Immutable after construction; share freely.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    bodies: Vec<Body>,
    joints: Vec<Joint>,
    spheres: Vec<CollisionSphere>,
    components: Vec<Component>,
    /// body index -> joint index (usize::MAX when none); joint -> body.
    body_of_joint: Vec<usize>,
}

impl RobotModel {
    /// Validate and assemble a model. Every type invariant is checked here so
    /// downstream code can rely on a well-formed tree.
    pub fn new(
        bodies: Vec<Body>,
        joints: Vec<Joint>,
        spheres: Vec<CollisionSphere>,
        components: Vec<Component>,
    ) -> Result<Self, ModelError> {
        if bodies.is_empty() {
            return Err(ModelError::NoBodies);
        }
        if bodies[0].parent.is_some() {
            return Err(ModelError::RootNotFirst);
        }
        let mut joint_user = alloc::vec![usize::MAX; joints.len()];
        for (i, body) in bodies.iter().enumerate() {
            match body.parent {
                None if i != 0 => return Err(ModelError::ExtraRoot { body: i }),
                Some(p) if p >= i => return Err(ModelError::BadParent { body: i }),
                _ => {}
            }
            if bodies[..i].iter().any(|b| b.name == body.name) {
                return Err(ModelError::DuplicateBodyName { body: i });
            }
            if let Some(j) = body.joint {
                if j >= joints.len() {
                    return Err(ModelError::JointOutOfRange { body: i });
                }
                if joint_user[j] != usize::MAX {
                    return Err(ModelError::DuplicateJoint { joint: j });
                }
                joint_user[j] = i;
            }
            if !(body.mass > 0.0) || !body.mass.is_finite() {
                return Err(ModelError::NonPositiveMass { body: i });
            }
            if !inertia_is_spd(&body.inertia) {
                return Err(ModelError::BadInertia { body: i });
            }
            if body.component >= components.len() {
                return Err(ModelError::ComponentOutOfRange { body: i });
            }
        }
        if let Some(j) = joint_user.iter().position(|&b| b == usize::MAX) {
            return Err(ModelError::UnusedJoint { joint: j });
        }
        for (j, joint) in joints.iter().enumerate() {
            if !(joint.lower < joint.upper) {
                return Err(ModelError::BadJointLimits { joint: j });
            }
            for (value, what) in [
                (joint.velocity_limit, "velocity limit"),
                (joint.torque_limit, "torque limit"),
                (joint.kp, "kp"),
                (joint.kd, "kd"),
            ] {
                if !(value > 0.0) || !value.is_finite() {
                    return Err(ModelError::NonPositiveJointParam { joint: j, what });
                }
            }
            if joint.setpoint_default < joint.lower || joint.setpoint_default > joint.upper {
                return Err(ModelError::DefaultSetpointOutOfLimits { joint: j });
            }
        }
        for (s, sphere) in spheres.iter().enumerate() {
            if sphere.body >= bodies.len() {
                return Err(ModelError::SphereBodyOutOfRange { sphere: s });
            }
            if !(sphere.radius > 0.0) || !sphere.radius.is_finite() {
                return Err(ModelError::NonPositiveRadius { sphere: s });
            }
        }
        if components.is_empty() {
            return Err(ModelError::NoComponents);
        }
        for (c, comp) in components.iter().enumerate() {
            if components[..c].iter().any(|other| other.name == comp.name) {
                return Err(ModelError::DuplicateComponentName { component: c });
            }
            if !comp.weight.is_finite() || comp.weight < 0.0 {
                return Err(ModelError::BadComponentWeight { component: c });
            }
        }
        let model = RobotModel {
            body_of_joint: joint_user,
            bodies,
            joints,
            spheres,
            components,
        };
        if model.self_collision(&model.default_pose())? {
            return Err(ModelError::DefaultPoseCollides);
        }
        Ok(model)
    }

    pub fn bodies(&self) -> &[Body] {
        &self.bodies
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn spheres(&self) -> &[CollisionSphere] {
        &self.spheres
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    /// Degree-of-freedom count (articulated joints only).
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn body_of_joint(&self, joint: usize) -> usize {
        self.body_of_joint[joint]
    }

    /// Reference configuration: root at the world origin, joints at their
    /// default setpoints.
    pub fn default_pose(&self) -> Pose {
        Pose {
            root_position: Vector3::zeros(),
            root_orientation: UnitQuaternion::identity(),
            joints: self.joints.iter().map(|j| j.setpoint_default).collect(),
        }
    }

    /// Default joint setpoints as a vector.
    pub fn default_setpoints(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.setpoint_default).collect()
    }

    fn check_dims(&self, joints: &[f64]) -> Result<(), ModelError> {
        if joints.len() != self.joints.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.joints.len(),
                got: joints.len(),
            });
        }
        Ok(())
    }

    /// World transform of every body for the given pose.
    pub fn forward_kinematics(&self, pose: &Pose) -> Result<Vec<Isometry3<f64>>, ModelError> {
        self.check_dims(&pose.joints)?;
        let mut transforms: Vec<Isometry3<f64>> = Vec::with_capacity(self.bodies.len());
        for body in &self.bodies {
            let world = match body.parent {
                None => Isometry3::from_parts(
                    Translation3::from(pose.root_position),
                    pose.root_orientation,
                ),
                Some(p) => {
                    let attach = Isometry3::from_parts(
                        Translation3::from(body.attach_translation),
                        body.attach_rotation,
                    );
                    let articulation = match body.joint {
                        Some(j) => UnitQuaternion::from_axis_angle(
                            &self.joints[j].axis,
                            pose.joints[j],
                        ),
                        None => UnitQuaternion::identity(),
                    };
                    transforms[p] * attach * Isometry3::from_parts(Translation3::identity(), articulation)
                }
            };
            transforms.push(world);
        }
        Ok(transforms)
    }

    /// World centers of all collision spheres for the given pose.
    pub fn sphere_centers(&self, pose: &Pose) -> Result<Vec<Vector3<f64>>, ModelError> {
        let transforms = self.forward_kinematics(pose)?;
        Ok(self
            .spheres
            .iter()
            .map(|s| transforms[s.body].transform_point(&s.offset.into()).coords)
            .collect())
    }

    /// True iff two collision spheres on non-adjacent bodies overlap.
    /// Spheres on the same body or on a parent-child pair never collide.
    pub fn self_collision(&self, pose: &Pose) -> Result<bool, ModelError> {
        let centers = self.sphere_centers(pose)?;
        for i in 0..self.spheres.len() {
            for j in (i + 1)..self.spheres.len() {
                let (bi, bj) = (self.spheres[i].body, self.spheres[j].body);
                if bi == bj || self.adjacent(bi, bj) {
                    continue;
                }
                let gap = (centers[i] - centers[j]).norm();
                if gap < self.spheres[i].radius + self.spheres[j].radius {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    fn adjacent(&self, a: usize, b: usize) -> bool {
        self.bodies[a].parent == Some(b) || self.bodies[b].parent == Some(a)
    }

    /// True iff every joint angle lies inside its closed limit interval.
    pub fn within_limits(&self, joints: &[f64]) -> Result<bool, ModelError> {
        self.check_dims(joints)?;
        Ok(self
            .joints
            .iter()
            .zip(joints)
            .all(|(j, &q)| q >= j.lower && q <= j.upper))
    }

    /// Total mass, kg.
    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }
}

/// Symmetric within a scaled tolerance and positive-definite (Cholesky).
fn inertia_is_spd(m: &Matrix3<f64>) -> bool {
    let scale = m.abs().max().max(1e-12);
    if (m - m.transpose()).abs().max() > 1e-9 * scale {
        return false;
    }
    m.iter().all(|x| x.is_finite()) && nalgebra::Cholesky::new(*m).is_some()
}
