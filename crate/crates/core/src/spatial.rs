//! Six-dimensional spatial algebra for the articulated-body dynamics.
//!
//! Motion vectors are `[angular; linear]` and force vectors `[torque; force]`,
//! both expressed about a frame's origin in that frame's coordinates. A
//! [`Xform`] carries a rotation `E` and an origin offset `r` and maps parent
//! coordinates to child coordinates (the usual Plücker transform), so the
//! same object serves motion, force, and inertia transforms without building
//! 6x6 matrices on the hot path.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

#[inline]
pub fn angular(m: &Vector6<f64>) -> Vector3<f64> {
    m.fixed_rows::<3>(0).into_owned()
}

#[inline]
pub fn linear(m: &Vector6<f64>) -> Vector3<f64> {
    m.fixed_rows::<3>(3).into_owned()
}

#[inline]
pub fn compose(top: &Vector3<f64>, bottom: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(top.x, top.y, top.z, bottom.x, bottom.y, bottom.z)
}

/// Motion cross product `v x m`: the rate of change of a motion vector `m`
/// carried along by a body moving with `v`.
pub fn cross_motion(v: &Vector6<f64>, m: &Vector6<f64>) -> Vector6<f64> {
    let (w, vl) = (angular(v), linear(v));
    let (mw, ml) = (angular(m), linear(m));
    compose(&w.cross(&mw), &(vl.cross(&mw) + w.cross(&ml)))
}

/// Force cross product `v x* f`: the rate of change of a force vector `f`
/// carried along by a body moving with `v`.
pub fn cross_force(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let (w, vl) = (angular(v), linear(v));
    let (n, fl) = (angular(f), linear(f));
    compose(&(w.cross(&n) + vl.cross(&fl)), &w.cross(&fl))
}

/// Spatial inertia about the body-frame origin, from mass, center-of-mass
/// offset `c` (body frame), and rotational inertia about the center of mass.
pub fn spatial_inertia(mass: f64, com: &Vector3<f64>, inertia_com: &Matrix3<f64>) -> Matrix6<f64> {
    let cx = skew(com);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(inertia_com + mass * cx * cx.transpose()));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(mass * cx));
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(mass * cx.transpose()));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * mass));
    out
}

/// Coordinate transform from a parent frame to a child frame. `E` rotates
/// parent-coordinate vectors into child coordinates; `r` is the child origin
/// expressed in parent coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Xform {
    pub e: Matrix3<f64>,
    pub r: Vector3<f64>,
}

impl Xform {
    pub fn identity() -> Self {
        Xform {
            e: Matrix3::identity(),
            r: Vector3::zeros(),
        }
    }

    /// Motion vector: parent coordinates -> child coordinates.
    pub fn motion(&self, m: &Vector6<f64>) -> Vector6<f64> {
        let (w, v) = (angular(m), linear(m));
        compose(&(self.e * w), &(self.e * (v - self.r.cross(&w))))
    }

    /// Force vector: child coordinates -> parent coordinates (the transpose
    /// of [`Xform::motion`], as used in the inward dynamics passes).
    pub fn force_to_parent(&self, f: &Vector6<f64>) -> Vector6<f64> {
        let fl = self.e.transpose() * linear(f);
        let n = self.e.transpose() * angular(f) + self.r.cross(&fl);
        compose(&n, &fl)
    }

    /// Articulated inertia: child coordinates -> parent coordinates
    /// (`X^T I X` with the full Plücker matrix).
    pub fn inertia_to_parent(&self, inertia: &Matrix6<f64>) -> Matrix6<f64> {
        let x = self.to_matrix();
        x.transpose() * inertia * x
    }

    /// Full 6x6 Plücker motion matrix (parent -> child).
    pub fn to_matrix(&self) -> Matrix6<f64> {
        let mut x = Matrix6::zeros();
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.e);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.e);
        x.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-self.e * skew(&self.r)));
        x
    }
}
