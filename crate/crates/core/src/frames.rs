//! Rotation and frame mathematics: quaternion conversion, path-frame
//! construction, yaw alignment, and geodesic distance on orientations.
//!
//! Conventions used across the crate:
//! - Euler angles are intrinsic Z-Y-X (yaw, then pitch, then roll).
//! - Quaternions are unit quaternions in nalgebra's `(w; x, y, z)` layout.
//! - The path frame is gravity-aligned: x/y horizontal, z vertical, with the
//!   x-axis following the root's facing direction projected to the ground.

use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Threshold below which a quaternion is considered degenerate (zero).
const QUAT_NORM_EPS: f64 = 1e-6;

/// Facing directions within this angle of vertical use the fallback axis.
const VERTICAL_FALLBACK_COS: f64 = 0.996_194_698_091_745_5; // cos(5 deg)

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameError {
    /// The quaternion norm is too close to zero to define a rotation.
    ZeroQuaternion,
}

impl fmt::Display for FrameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameError::ZeroQuaternion => write!(f, "quaternion norm is zero"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FrameError {}

/// Gravity-aligned frame at the root: x/y axes horizontal, z vertical, x-axis
/// along the root's horizontal facing direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathFrame {
    /// Root position, world coordinates (m).
    pub origin: Vector3<f64>,
    /// Heading of the frame x-axis (rad).
    pub yaw: f64,
}

impl PathFrame {
    /// Rotation taking world quantities into this frame (inverse yaw).
    pub fn inverse_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -self.yaw)
    }

    /// Rotation taking path-frame quantities back to world.
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    /// Express a world orientation in this frame.
    pub fn transform_orientation(&self, q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
        self.inverse_rotation() * q
    }

    /// Express a world vector in this frame.
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.inverse_rotation() * v
    }

    /// Express a world point in this frame (translated and rotated).
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.inverse_rotation() * (p - self.origin)
    }

    /// Inverse of [`PathFrame::transform_vector`].
    pub fn untransform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }
}

/// Convert a unit quaternion to a rotation matrix.
///
/// The input is renormalized when its norm deviates from one by less than
/// [`QUAT_NORM_EPS`]; a zero quaternion is rejected.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Result<Matrix3<f64>, FrameError> {
    let n = q.norm();
    if n < QUAT_NORM_EPS {
        return Err(FrameError::ZeroQuaternion);
    }
    let unit = UnitQuaternion::from_quaternion(*q);
    Ok(*unit.to_rotation_matrix().matrix())
}

/// Heading of a world-frame direction, ignoring its vertical component.
fn horizontal_heading(dir: &Vector3<f64>) -> f64 {
    dir.y.atan2(dir.x)
}

/// Build the path frame for a root pose.
///
/// The frame yaw is the heading of the body x-axis projected to the
/// horizontal plane. When the body x-axis is within 5 degrees of vertical the
/// projection degenerates; the body z-axis (sign-corrected so the heading
/// stays continuous across the switch) is projected instead.
pub fn path_frame(position: &Vector3<f64>, orientation: &UnitQuaternion<f64>) -> PathFrame {
    let x_world = orientation * Vector3::x_axis().into_inner();
    let yaw = if x_world.z.abs() > VERTICAL_FALLBACK_COS {
        let z_world = orientation * Vector3::z_axis().into_inner();
        let sign = if x_world.z > 0.0 { -1.0 } else { 1.0 };
        horizontal_heading(&(sign * z_world))
    } else {
        horizontal_heading(&x_world)
    };
    PathFrame {
        origin: *position,
        yaw,
    }
}

/// Geodesic distance between two unit quaternions, in `[0, pi]` radians.
///
/// Sign-safe under the double cover: `q` and `-q` are the same rotation.
pub fn geodesic_distance(q1: &UnitQuaternion<f64>, q2: &UnitQuaternion<f64>) -> f64 {
    let dot = q1.coords.dot(&q2.coords).abs().min(1.0);
    2.0 * dot.acos()
}

/// Yaw angle that, applied about the world z-axis before `target`, minimizes
/// the geodesic distance to `reference`. Solved in closed form.
pub fn optimal_yaw(target: &UnitQuaternion<f64>, reference: &UnitQuaternion<f64>) -> f64 {
    // dot(Rz(psi) * target, reference) = a cos(psi/2) + b sin(psi/2) with
    // a = <target, reference> and b = <k * target, reference>, k the pure
    // z quaternion. |dot| is maximal at psi = 2 atan2(b, a).
    let a = target.coords.dot(&reference.coords);
    let k = Quaternion::new(0.0, 0.0, 0.0, 1.0);
    let b = (k * target.quaternion()).coords.dot(&reference.coords);
    2.0 * b.atan2(a)
}

/// Rotate `target` about the world z-axis so its geodesic distance to
/// `reference` is minimal.
pub fn yaw_align(
    target: &UnitQuaternion<f64>,
    reference: &UnitQuaternion<f64>,
) -> UnitQuaternion<f64> {
    let psi = optimal_yaw(target, reference);
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), psi) * target
}

/// Intrinsic Z-Y-X rotation (yaw about z, then pitch about y, then roll
/// about x).
pub fn quat_from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll)
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut w = a % two_pi;
    if w <= -core::f64::consts::PI {
        w += two_pi;
    } else if w > core::f64::consts::PI {
        w -= two_pi;
    }
    w
}
