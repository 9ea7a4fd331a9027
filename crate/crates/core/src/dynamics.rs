//! Reduced-coordinate time stepping for the floating-base articulated system:
//! articulated-body forward dynamics, compliant ground contact on collision
//! spheres, PD actuation, disturbance wrenches, and per-step contact-force
//! reporting.
//!
//! The root body carries six unactuated degrees of freedom; joints are
//! revolute. Each control step (`control_dt`, 0.02 s at the 50 Hz control
//! rate) is subdivided into fixed physics substeps integrated with
//! semi-implicit Euler. Contact with the ground plane z = 0 is a normal
//! spring-damper plus tangential viscous friction clamped to the Coulomb
//! cone, evaluated per penetrating sphere.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};

use crate::model::{ModelError, Pose, RobotModel};
use crate::spatial::{self, Xform};

/// Control period of the 50 Hz loop, s.
pub const DEFAULT_CONTROL_DT: f64 = 0.02;

/// Ground-contact material parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactParams {
    /// Normal spring stiffness, N/m.
    pub stiffness: f64,
    /// Normal (and tangential) damping, N·s/m.
    pub damping: f64,
    /// Coulomb friction coefficient.
    pub friction: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams {
            stiffness: 2.0e4,
            damping: 200.0,
            friction: 0.8,
        }
    }
}

/// Simulator parameters. Defaults give a 1/400 s physics step under the
/// 0.02 s control period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Gravitational acceleration magnitude (acts along -z), m/s².
    pub gravity: f64,
    /// Physics substeps per control step.
    pub substeps: usize,
    pub contact: ContactParams,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            gravity: 9.81,
            substeps: 8,
            contact: ContactParams::default(),
        }
    }
}

/// Full simulator state between control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub pose: Pose,
    /// Root linear velocity, world frame, m/s.
    pub root_lin_vel: Vector3<f64>,
    /// Root angular velocity, body frame, rad/s.
    pub root_ang_vel: Vector3<f64>,
    /// Joint velocities, rad/s.
    pub joint_vel: Vec<f64>,
    /// Root linear acceleration from the most recent step, world frame, m/s².
    pub root_lin_acc: Vector3<f64>,
    /// Joint accelerations from the most recent step, rad/s².
    pub joint_acc: Vec<f64>,
    /// Simulated time, s.
    pub time: f64,
}

impl SimState {
    /// State at rest in the given pose.
    pub fn from_pose(pose: Pose) -> Self {
        let n = pose.joints.len();
        SimState {
            pose,
            root_lin_vel: Vector3::zeros(),
            root_ang_vel: Vector3::zeros(),
            joint_vel: vec![0.0; n],
            root_lin_acc: Vector3::zeros(),
            joint_acc: vec![0.0; n],
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.root_position.iter().all(|x| x.is_finite())
            && self.pose.root_orientation.coords.iter().all(|x| x.is_finite())
            && self.pose.joints.iter().all(|x| x.is_finite())
            && self.root_lin_vel.iter().all(|x| x.is_finite())
            && self.root_ang_vel.iter().all(|x| x.is_finite())
            && self.joint_vel.iter().all(|x| x.is_finite())
            && self.root_lin_acc.iter().all(|x| x.is_finite())
            && self.joint_acc.iter().all(|x| x.is_finite())
            && self.time.is_finite()
    }
}

/// Contact and actuation summary for one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactReport {
    /// Per body: summed sphere contact force at the substep where its
    /// magnitude peaked, world frame, N. Zero for bodies that never touched.
    pub body_forces: Vec<Vector3<f64>>,
    /// Per component: member-body force sum at its peak substep, N.
    pub component_forces: Vec<Vector3<f64>>,
    /// Applied joint torques, substep mean, N·m.
    pub torques: Vec<f64>,
}

impl ContactReport {
    pub fn zeros(n_bodies: usize, n_components: usize, n_joints: usize) -> Self {
        ContactReport {
            body_forces: vec![Vector3::zeros(); n_bodies],
            component_forces: vec![Vector3::zeros(); n_components],
            torques: vec![0.0; n_joints],
        }
    }
}

/// External wrench on a body: force applied at the body's center of mass
/// plus a free torque, both in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub body: usize,
    /// N, world frame.
    pub force: Vector3<f64>,
    /// N·m, world frame.
    pub torque: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    Model(ModelError),
    /// A wrench referenced a body outside the model.
    BodyOutOfRange { body: usize },
    /// Integration produced a non-finite state entry at the given time.
    NonFinite { time: f64 },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Model(e) => write!(f, "{e}"),
            SimError::BodyOutOfRange { body } => {
                write!(f, "wrench references body {body} outside the model")
            }
            SimError::NonFinite { time } => {
                write!(f, "integration diverged (non-finite state) at t = {time} s")
            }
        }
    }
}

impl From<ModelError> for SimError {
    fn from(e: ModelError) -> Self {
        SimError::Model(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SimError {}

/// World-frame motion of one body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyMotion {
    /// Angular velocity, world frame, rad/s.
    pub ang_vel: Vector3<f64>,
    /// Center-of-mass linear velocity, world frame, m/s.
    pub com_vel: Vector3<f64>,
}

/// PD torques with gains scaled by `gain_scale` and clamped to the per-joint
/// torque limits.
pub fn pd_torques(
    model: &RobotModel,
    setpoints: &[f64],
    state: &SimState,
    gain_scale: f64,
) -> Result<Vec<f64>, SimError> {
    if setpoints.len() != model.n_joints() || state.pose.joints.len() != model.n_joints() {
        return Err(ModelError::DimensionMismatch {
            expected: model.n_joints(),
            got: setpoints.len(),
        }
        .into());
    }
    Ok(pd_raw(
        model,
        setpoints,
        &state.pose.joints,
        &state.joint_vel,
        gain_scale,
    ))
}

fn pd_raw(
    model: &RobotModel,
    setpoints: &[f64],
    q: &[f64],
    qd: &[f64],
    gain_scale: f64,
) -> Vec<f64> {
    model
        .joints()
        .iter()
        .enumerate()
        .map(|(j, joint)| {
            let tau = gain_scale * joint.kp * (setpoints[j] - q[j]) - gain_scale * joint.kd * qd[j];
            tau.clamp(-joint.torque_limit, joint.torque_limit)
        })
        .collect()
}

/// Per-body world transforms and spatial velocities for one simulator state.
struct Kinematics {
    /// Parent-to-body coordinate transform (identity for the root).
    xup: Vec<Xform>,
    /// Body-to-world rotation.
    rot: Vec<UnitQuaternion<f64>>,
    /// Body origin, world frame.
    pos: Vec<Vector3<f64>>,
    /// Spatial velocity in body coordinates.
    vel: Vec<Vector6<f64>>,
}

fn kinematics(
    model: &RobotModel,
    orientation: &UnitQuaternion<f64>,
    position: &Vector3<f64>,
    ang_vel_body: &Vector3<f64>,
    lin_vel_body: &Vector3<f64>,
    q: &[f64],
    qd: &[f64],
) -> Kinematics {
    let n = model.n_bodies();
    let mut kin = Kinematics {
        xup: Vec::with_capacity(n),
        rot: Vec::with_capacity(n),
        pos: Vec::with_capacity(n),
        vel: Vec::with_capacity(n),
    };
    for body in model.bodies() {
        match body.parent {
            None => {
                kin.xup.push(Xform::identity());
                kin.rot.push(*orientation);
                kin.pos.push(*position);
                kin.vel.push(spatial::compose(ang_vel_body, lin_vel_body));
            }
            Some(p) => {
                let child_to_parent = match body.joint {
                    Some(j) => {
                        body.attach_rotation
                            * UnitQuaternion::from_axis_angle(&model.joints()[j].axis, q[j])
                    }
                    None => body.attach_rotation,
                };
                let xup = Xform {
                    e: child_to_parent.to_rotation_matrix().matrix().transpose(),
                    r: body.attach_translation,
                };
                let mut vel = xup.motion(&kin.vel[p]);
                if let Some(j) = body.joint {
                    vel += spatial::compose(
                        &(model.joints()[j].axis.into_inner() * qd[j]),
                        &Vector3::zeros(),
                    );
                }
                kin.rot.push(kin.rot[p] * child_to_parent);
                kin.pos.push(kin.pos[p] + kin.rot[p] * body.attach_translation);
                kin.xup.push(xup);
                kin.vel.push(vel);
            }
        }
    }
    kin
}

/// Articulated-body forward dynamics. `f_ext` holds the total external
/// spatial force per body (about the body origin, body coordinates),
/// including gravity. `damping_h` is the per-joint product of velocity-gain
/// and substep length; it stiffens each joint-space inertia so the velocity
/// feedback acts on the post-step velocity (implicit damping), which keeps
/// high derivative gains stable at the fixed substep. Returns the root
/// spatial acceleration (body coordinates) and the joint accelerations.
fn aba(
    model: &RobotModel,
    kin: &Kinematics,
    qd: &[f64],
    tau: &[f64],
    damping_h: &[f64],
    f_ext: &[Vector6<f64>],
) -> Option<(Vector6<f64>, Vec<f64>)> {
    let n = model.n_bodies();
    let mut inertia: Vec<Matrix6<f64>> = model
        .bodies()
        .iter()
        .map(|b| spatial::spatial_inertia(b.mass, &b.com, &b.inertia))
        .collect();
    let mut bias: Vec<Vector6<f64>> = (0..n)
        .map(|i| spatial::cross_force(&kin.vel[i], &(inertia[i] * kin.vel[i])) - f_ext[i])
        .collect();
    // Velocity-product acceleration of each articulated joint.
    let mut cterm: Vec<Vector6<f64>> = vec![Vector6::zeros(); n];
    let mut joint_terms: Vec<Option<(Vector6<f64>, f64, f64)>> = vec![None; n];
    for (i, body) in model.bodies().iter().enumerate().skip(1) {
        if let Some(j) = body.joint {
            let s = spatial::compose(&model.joints()[j].axis.into_inner(), &Vector3::zeros());
            cterm[i] = spatial::cross_motion(&kin.vel[i], &(s * qd[j]));
        }
    }

    // ----- Inward pass: articulated inertias and bias forces -----
    for i in (1..n).rev() {
        let body = &model.bodies()[i];
        let (ia, pa) = match body.joint {
            Some(j) => {
                let s = spatial::compose(&model.joints()[j].axis.into_inner(), &Vector3::zeros());
                let u = inertia[i] * s;
                let d = s.dot(&u) + damping_h[j];
                let uu = tau[j] - s.dot(&bias[i]);
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                joint_terms[i] = Some((u, d, uu));
                let ia = inertia[i] - (u * u.transpose()) / d;
                let pa = bias[i] + ia * cterm[i] + u * (uu / d);
                (ia, pa)
            }
            None => (inertia[i], bias[i] + inertia[i] * cterm[i]),
        };
        let p = body.parent.expect("non-root body has a parent");
        inertia[p] += kin.xup[i].inertia_to_parent(&ia);
        bias[p] += kin.xup[i].force_to_parent(&pa);
    }

    // ----- Root solve -----
    let rhs = -bias[0];
    let a0 = match nalgebra::Cholesky::new(inertia[0]) {
        Some(chol) => chol.solve(&rhs),
        None => inertia[0].lu().solve(&rhs)?,
    };

    // ----- Outward pass: accelerations -----
    let mut acc: Vec<Vector6<f64>> = Vec::with_capacity(n);
    acc.push(a0);
    let mut qdd = vec![0.0; model.n_joints()];
    for (i, body) in model.bodies().iter().enumerate().skip(1) {
        let p = body.parent.expect("non-root body has a parent");
        let a_p = kin.xup[i].motion(&acc[p]) + cterm[i];
        let a_i = match body.joint {
            Some(j) => {
                let (u, d, uu) = joint_terms[i].as_ref().expect("terms saved in inward pass");
                let s = spatial::compose(&model.joints()[j].axis.into_inner(), &Vector3::zeros());
                let qdd_j = (uu - u.dot(&a_p)) / d;
                qdd[j] = qdd_j;
                a_p + s * qdd_j
            }
            None => a_p,
        };
        acc.push(a_i);
    }
    Some((a0, qdd))
}

/// Enforce joint stops and velocity limits with momentum-consistent
/// impulses. Each impulse acts along one joint axis and is distributed over
/// the whole tree through the inverse inertia, so it conserves total
/// momentum and can only remove kinetic energy. Stop targets are chosen so
/// the position update lands exactly on the limit. Sweeps repeat until no
/// constraint is violated (or a fixed cap, since impulses couple joints).
fn resolve_joint_impulses(
    model: &RobotModel,
    orientation: &UnitQuaternion<f64>,
    position: &Vector3<f64>,
    q: &[f64],
    h: f64,
    ang_vel: &mut Vector3<f64>,
    lin_vel_body: &mut Vector3<f64>,
    qd: &mut [f64],
) {
    let nj = model.n_joints();
    if nj == 0 {
        return;
    }
    let zero3 = Vector3::zeros();
    let zero_qd = vec![0.0; nj];
    let zero_damping = vec![0.0; nj];
    let zero_f: Vec<Vector6<f64>> = vec![Vector6::zeros(); model.n_bodies()];
    // The inverse-inertia columns depend only on the configuration, which is
    // frozen during resolution, so both the kinematics and the columns are
    // computed lazily and cached.
    let mut kin0: Option<Kinematics> = None;
    let mut columns: Vec<Option<(Vector6<f64>, Vec<f64>)>> = vec![None; nj];
    for _ in 0..2 * nj + 2 {
        let mut any = false;
        for j in 0..nj {
            let joint = &model.joints()[j];
            let q_pred = q[j] + h * qd[j];
            let target = if q_pred < joint.lower && qd[j] < 0.0 {
                (joint.lower - q[j]) / h
            } else if q_pred > joint.upper && qd[j] > 0.0 {
                (joint.upper - q[j]) / h
            } else if qd[j] > joint.velocity_limit {
                joint.velocity_limit
            } else if qd[j] < -joint.velocity_limit {
                -joint.velocity_limit
            } else {
                continue;
            };
            if (target - qd[j]).abs() <= 1e-12 {
                continue;
            }
            if kin0.is_none() {
                kin0 = Some(kinematics(
                    model,
                    orientation,
                    position,
                    &zero3,
                    &zero3,
                    q,
                    &zero_qd,
                ));
            }
            if columns[j].is_none() {
                let mut unit = vec![0.0; nj];
                unit[j] = 1.0;
                let kin = kin0.as_ref().expect("kinematics computed above");
                columns[j] = match aba(model, kin, &zero_qd, &unit, &zero_damping, &zero_f) {
                    Some(col) => Some(col),
                    None => continue,
                };
            }
            let (a0_col, qdd_col) = columns[j].as_ref().expect("column cached above");
            let diag = qdd_col[j];
            if !(diag > 1e-12) {
                continue;
            }
            let lam = (target - qd[j]) / diag;
            *ang_vel += lam * spatial::angular(a0_col);
            *lin_vel_body += lam * spatial::linear(a0_col);
            for (v, dv) in qd.iter_mut().zip(qdd_col) {
                *v += lam * dv;
            }
            qd[j] = target;
            any = true;
        }
        if !any {
            return;
        }
    }
}

/// Contact force at one penetrating sphere, world frame, applied at the
/// lowest sphere point. Returns `None` when there is no contact.
fn sphere_contact(
    params: &ContactParams,
    center: &Vector3<f64>,
    radius: f64,
    // Velocity of the body point at the contact location, world frame.
    point_vel: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let penetration = radius - center.z;
    if penetration <= 0.0 {
        return None;
    }
    let normal = params.stiffness * penetration - params.damping * point_vel.z;
    if normal <= 0.0 {
        return None;
    }
    let tangent_vel = Vector3::new(point_vel.x, point_vel.y, 0.0);
    let speed = tangent_vel.norm();
    let tangential = if speed > 1e-12 {
        let magnitude = (params.damping * speed).min(params.friction * normal);
        -tangent_vel * (magnitude / speed)
    } else {
        Vector3::zeros()
    };
    Some(Vector3::new(tangential.x, tangential.y, normal))
}

/// Advance one control step: `params.substeps` physics substeps under PD
/// torques toward `setpoints`, gravity, ground contact, and constant
/// disturbance wrenches. Returns the new state and the step's contact report.
pub fn step(
    model: &RobotModel,
    params: &SimParams,
    state: &SimState,
    setpoints: &[f64],
    gain_scale: f64,
    disturbances: &[Wrench],
    control_dt: f64,
) -> Result<(SimState, ContactReport), SimError> {
    let nj = model.n_joints();
    if setpoints.len() != nj || state.pose.joints.len() != nj || state.joint_vel.len() != nj {
        return Err(ModelError::DimensionMismatch {
            expected: nj,
            got: setpoints.len(),
        }
        .into());
    }
    for w in disturbances {
        if w.body >= model.n_bodies() {
            return Err(SimError::BodyOutOfRange { body: w.body });
        }
    }
    let h = control_dt / params.substeps as f64;
    let gravity = Vector3::new(0.0, 0.0, -params.gravity);
    // Velocity feedback is folded into the forward dynamics (implicit in the
    // post-step joint velocity), so high derivative gains stay stable at the
    // fixed substep length.
    let damping_h: Vec<f64> = model.joints().iter().map(|j| h * gain_scale * j.kd).collect();

    let mut orientation = state.pose.root_orientation;
    let mut position = state.pose.root_position;
    let mut ang_vel = state.root_ang_vel;
    let mut lin_vel_body = orientation.inverse_transform_vector(&state.root_lin_vel);
    let mut q = state.pose.joints.clone();
    let mut qd = state.joint_vel.clone();
    let mut time = state.time;

    let mut report = ContactReport::zeros(model.n_bodies(), model.components().len(), nj);
    let mut lin_acc_world = state.root_lin_acc;
    let mut qdd_last = state.joint_acc.clone();

    for _ in 0..params.substeps {
        let tau = pd_raw(model, setpoints, &q, &qd, gain_scale);
        for (sum, t) in report.torques.iter_mut().zip(&tau) {
            *sum += t / params.substeps as f64;
        }

        let kin = kinematics(model, &orientation, &position, &ang_vel, &lin_vel_body, &q, &qd);

        // External forces per body, spatial, body coordinates.
        let mut f_ext: Vec<Vector6<f64>> = model
            .bodies()
            .iter()
            .enumerate()
            .map(|(i, body)| {
                let f_local = kin.rot[i].inverse_transform_vector(&(body.mass * gravity));
                spatial::compose(&body.com.cross(&f_local), &f_local)
            })
            .collect();
        for w in disturbances {
            let body = &model.bodies()[w.body];
            let f_local = kin.rot[w.body].inverse_transform_vector(&w.force);
            let t_local = kin.rot[w.body].inverse_transform_vector(&w.torque);
            f_ext[w.body] +=
                spatial::compose(&(body.com.cross(&f_local) + t_local), &f_local);
        }

        // Ground contact per sphere.
        let mut body_force_world = vec![Vector3::zeros(); model.n_bodies()];
        for sphere in model.spheres() {
            let i = sphere.body;
            let center = kin.pos[i] + kin.rot[i] * sphere.offset;
            let contact_point = center - Vector3::new(0.0, 0.0, sphere.radius);
            let ang_w = kin.rot[i] * spatial::angular(&kin.vel[i]);
            let origin_vel_w = kin.rot[i] * spatial::linear(&kin.vel[i]);
            let point_vel = origin_vel_w + ang_w.cross(&(contact_point - kin.pos[i]));
            if let Some(force) = sphere_contact(&params.contact, &center, sphere.radius, &point_vel)
            {
                body_force_world[i] += force;
                let f_local = kin.rot[i].inverse_transform_vector(&force);
                let r_local = kin.rot[i].inverse_transform_vector(&(contact_point - kin.pos[i]));
                f_ext[i] += spatial::compose(&r_local.cross(&f_local), &f_local);
            }
        }
        for (peak, f) in report.body_forces.iter_mut().zip(&body_force_world) {
            if f.norm_squared() > peak.norm_squared() {
                *peak = *f;
            }
        }
        let mut comp_force = vec![Vector3::zeros(); model.components().len()];
        for (i, body) in model.bodies().iter().enumerate() {
            comp_force[body.component] += body_force_world[i];
        }
        for (peak, f) in report.component_forces.iter_mut().zip(&comp_force) {
            if f.norm_squared() > peak.norm_squared() {
                *peak = *f;
            }
        }

        let (a0, qdd) =
            aba(model, &kin, &qd, &tau, &damping_h, &f_ext).ok_or(SimError::NonFinite { time })?;

        // Classical world-frame root acceleration before the state advances.
        let alpha = spatial::angular(&a0);
        let a_origin = spatial::linear(&a0);
        lin_acc_world = orientation * (a_origin + ang_vel.cross(&lin_vel_body));
        qdd_last.copy_from_slice(&qdd);

        // ----- Semi-implicit Euler -----
        ang_vel += h * alpha;
        lin_vel_body += h * a_origin;
        for (v, a) in qd.iter_mut().zip(&qdd) {
            *v += h * a;
        }
        resolve_joint_impulses(
            model,
            &orientation,
            &position,
            &q,
            h,
            &mut ang_vel,
            &mut lin_vel_body,
            &mut qd,
        );
        orientation *= UnitQuaternion::from_scaled_axis(h * ang_vel);
        orientation = UnitQuaternion::new_normalize(orientation.into_inner());
        position += h * (orientation * lin_vel_body);
        for (j, joint) in model.joints().iter().enumerate() {
            // Stops were resolved as velocity impulses; the clamp only
            // sweeps up float dust so poses always report in-range angles.
            q[j] = (q[j] + h * qd[j]).clamp(joint.lower, joint.upper);
        }
        time += h;

        let finite = position.iter().all(|x| x.is_finite())
            && orientation.coords.iter().all(|x| x.is_finite())
            && ang_vel.iter().all(|x| x.is_finite())
            && lin_vel_body.iter().all(|x| x.is_finite())
            && q.iter().all(|x| x.is_finite())
            && qd.iter().all(|x| x.is_finite());
        if !finite {
            return Err(SimError::NonFinite { time });
        }
    }

    let next = SimState {
        pose: Pose {
            root_position: position,
            root_orientation: orientation,
            joints: q,
        },
        root_lin_vel: orientation * lin_vel_body,
        root_ang_vel: ang_vel,
        joint_vel: qd,
        root_lin_acc: lin_acc_world,
        joint_acc: qdd_last,
        time,
    };
    Ok((next, report))
}

/// World-frame angular and center-of-mass velocities of every body.
pub fn body_motions(model: &RobotModel, state: &SimState) -> Result<Vec<BodyMotion>, SimError> {
    if state.pose.joints.len() != model.n_joints() {
        return Err(ModelError::DimensionMismatch {
            expected: model.n_joints(),
            got: state.pose.joints.len(),
        }
        .into());
    }
    let lin_vel_body = state
        .pose
        .root_orientation
        .inverse_transform_vector(&state.root_lin_vel);
    let kin = kinematics(
        model,
        &state.pose.root_orientation,
        &state.pose.root_position,
        &state.root_ang_vel,
        &lin_vel_body,
        &state.pose.joints,
        &state.joint_vel,
    );
    Ok(model
        .bodies()
        .iter()
        .enumerate()
        .map(|(i, body)| {
            let ang = kin.rot[i] * spatial::angular(&kin.vel[i]);
            let origin = kin.rot[i] * spatial::linear(&kin.vel[i]);
            BodyMotion {
                ang_vel: ang,
                com_vel: origin + ang.cross(&(kin.rot[i] * body.com)),
            }
        })
        .collect())
}

/// Step with PD control toward fixed setpoints until every body's linear
/// speed stays below `lin_tol` and angular speed below `ang_tol` for
/// `hold_time` seconds of simulated time, or until `max_time` elapses.
pub fn settle(
    model: &RobotModel,
    params: &SimParams,
    state: &SimState,
    gain_scale: f64,
    setpoints: &[f64],
    max_time: f64,
    lin_tol: f64,
    ang_tol: f64,
    hold_time: f64,
) -> Result<(SimState, bool), SimError> {
    let mut current = state.clone();
    let mut quiet = 0.0;
    let mut elapsed = 0.0;
    while elapsed + 1e-12 < max_time {
        let (next, _) = step(
            model,
            params,
            &current,
            setpoints,
            gain_scale,
            &[],
            DEFAULT_CONTROL_DT,
        )?;
        current = next;
        elapsed += DEFAULT_CONTROL_DT;
        let motions = body_motions(model, &current)?;
        let at_rest = motions
            .iter()
            .all(|m| m.com_vel.norm() < lin_tol && m.ang_vel.norm() < ang_tol);
        if at_rest {
            quiet += DEFAULT_CONTROL_DT;
            if quiet + 1e-12 >= hold_time {
                return Ok((current, true));
            }
        } else {
            quiet = 0.0;
        }
    }
    Ok((current, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Body, CollisionSphere, Component, RobotModel};
    use crate::testutil;
    use alloc::string::ToString;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Single floating body with one ground sphere, no joints.
    fn free_body() -> RobotModel {
        RobotModel::new(
            vec![Body {
                name: "ball".to_string(),
                parent: None,
                attach_translation: Vector3::zeros(),
                attach_rotation: UnitQuaternion::identity(),
                joint: None,
                mass: 1.0,
                com: Vector3::zeros(),
                inertia: Matrix3::from_diagonal(&Vector3::new(0.004, 0.004, 0.004)),
                component: 0,
            }],
            vec![],
            vec![CollisionSphere {
                body: 0,
                offset: Vector3::zeros(),
                radius: 0.1,
            }],
            vec![Component {
                name: "all".to_string(),
                weight: 1.0,
            }],
        )
        .unwrap()
    }

    fn kin_of(model: &RobotModel, state: &SimState) -> Kinematics {
        let lin_vel_body = state
            .pose
            .root_orientation
            .inverse_transform_vector(&state.root_lin_vel);
        kinematics(
            model,
            &state.pose.root_orientation,
            &state.pose.root_position,
            &state.root_ang_vel,
            &lin_vel_body,
            &state.pose.joints,
            &state.joint_vel,
        )
    }

    fn gravity_f_ext(model: &RobotModel, kin: &Kinematics, g: f64) -> Vec<Vector6<f64>> {
        let gravity = Vector3::new(0.0, 0.0, -g);
        model
            .bodies()
            .iter()
            .enumerate()
            .map(|(i, body)| {
                let f_local = kin.rot[i].inverse_transform_vector(&(body.mass * gravity));
                spatial::compose(&body.com.cross(&f_local), &f_local)
            })
            .collect()
    }

    fn random_state(model: &RobotModel, rng: &mut ChaCha8Rng, vel_scale: f64) -> SimState {
        let joints: Vec<f64> = model
            .joints()
            .iter()
            .map(|j| rng.random_range(j.lower..=j.upper))
            .collect();
        let nj = joints.len();
        SimState {
            pose: Pose::new(
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..2.0),
                ),
                UnitQuaternion::from_euler_angles(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-3.0..3.0),
                ),
                joints,
            ),
            root_lin_vel: Vector3::from_fn(|_, _| rng.random_range(-vel_scale..=vel_scale)),
            root_ang_vel: Vector3::from_fn(|_, _| rng.random_range(-vel_scale..=vel_scale)),
            joint_vel: (0..nj)
                .map(|_| rng.random_range(-vel_scale..=vel_scale))
                .collect(),
            root_lin_acc: Vector3::zeros(),
            joint_acc: vec![0.0; nj],
            time: 0.0,
        }
    }

    /// Recursive Newton-Euler inverse dynamics: given accelerations, compute
    /// the joint torques and the residual base wrench. Independent oracle for
    /// the articulated-body pass.
    fn rnea(
        model: &RobotModel,
        kin: &Kinematics,
        qd: &[f64],
        a0: &Vector6<f64>,
        qdd: &[f64],
        f_ext: &[Vector6<f64>],
    ) -> (Vec<f64>, Vector6<f64>) {
        let n = model.n_bodies();
        let mut acc: Vec<Vector6<f64>> = Vec::with_capacity(n);
        let mut force: Vec<Vector6<f64>> = Vec::with_capacity(n);
        for (i, body) in model.bodies().iter().enumerate() {
            let a = match body.parent {
                None => *a0,
                Some(p) => {
                    let mut a = kin.xup[i].motion(&acc[p]);
                    if let Some(j) = body.joint {
                        let s =
                            spatial::compose(&model.joints()[j].axis.into_inner(), &Vector3::zeros());
                        a += spatial::cross_motion(&kin.vel[i], &(s * qd[j])) + s * qdd[j];
                    }
                    a
                }
            };
            let inertia = spatial::spatial_inertia(body.mass, &body.com, &body.inertia);
            force.push(
                inertia * a + spatial::cross_force(&kin.vel[i], &(inertia * kin.vel[i]))
                    - f_ext[i],
            );
            acc.push(a);
        }
        let mut tau = vec![0.0; model.n_joints()];
        for i in (1..n).rev() {
            let body = &model.bodies()[i];
            if let Some(j) = body.joint {
                let s = spatial::compose(&model.joints()[j].axis.into_inner(), &Vector3::zeros());
                tau[j] = s.dot(&force[i]);
            }
            let parent_force = kin.xup[i].force_to_parent(&force[i]);
            force[body.parent.unwrap()] += parent_force;
        }
        (tau, force[0])
    }

    #[test]
    fn pd_torque_identity_and_scaling() {
        let model = testutil::pendulum_with(|_, j| {
            j[0].kp = 10.0;
            j[0].kd = 5.0;
            j[0].torque_limit = 20.0;
        })
        .unwrap();
        let mut state = SimState::from_pose(model.default_pose());
        state.pose.joints[0] = 0.4;
        // Setpoint equals position, zero velocity: no torque.
        assert_abs_diff_eq!(
            pd_torques(&model, &[0.4], &state, 1.0).unwrap()[0],
            0.0,
            epsilon = 1e-12
        );
        // kp = 10, error = 0.1 rad: 1.0 N·m.
        assert_abs_diff_eq!(
            pd_torques(&model, &[0.5], &state, 1.0).unwrap()[0],
            1.0,
            epsilon = 1e-12
        );
        // Huge error clamps to the torque limit.
        assert_abs_diff_eq!(
            pd_torques(&model, &[100.0], &state, 1.0).unwrap()[0],
            20.0,
            epsilon = 1e-12
        );
        // gain_scale scales both gains.
        assert_abs_diff_eq!(
            pd_torques(&model, &[0.5], &state, 0.5).unwrap()[0],
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pd_torque_dimension_mismatch() {
        let model = testutil::pendulum();
        let state = SimState::from_pose(model.default_pose());
        assert!(matches!(
            pd_torques(&model, &[0.0, 0.0], &state, 1.0),
            Err(SimError::Model(ModelError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn aba_matches_analytic_pendulum() {
        // A huge base mass held up by a matching support force pins the
        // root; the bob then obeys the rigid-pendulum equation
        // qdd = -m g l sin(q) / I_pivot with l = 0.15 m and
        // I_pivot = 0.0075 + 1.0 * 0.15^2 = 0.03 kg·m².
        let base_mass = 1e9;
        let model = testutil::pendulum_with(|b, _| {
            b[0].mass = base_mass;
            b[0].inertia = Matrix3::from_diagonal(&Vector3::new(1e9, 1e9, 1e9));
        })
        .unwrap();
        let mut state = SimState::from_pose(model.default_pose());
        state.pose.joints[0] = 0.3;
        let kin = kin_of(&model, &state);
        let mut f_ext = gravity_f_ext(&model, &kin, 9.81);
        f_ext[0] += spatial::compose(
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, base_mass * 9.81),
        );
        let (a0, qdd) = aba(&model, &kin, &state.joint_vel, &[0.0], &[0.0], &f_ext).unwrap();
        let expected = -1.0 * 9.81 * 0.15 * 0.3f64.sin() / 0.03;
        assert_relative_eq!(qdd[0], expected, max_relative = 1e-6);
        // The supported base barely moves.
        assert_abs_diff_eq!(spatial::linear(&a0).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn free_fall_from_rest_has_zero_joint_acceleration() {
        // Uniform gravity on an unsupported system at rest causes no
        // internal motion: qdd = 0 and the root acceleration is exactly g.
        let model = testutil::planar_biped();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let mut state = random_state(&model, &mut rng, 0.0);
            state.root_lin_vel = Vector3::zeros();
            let kin = kin_of(&model, &state);
            let f_ext = gravity_f_ext(&model, &kin, 9.81);
            let tau = vec![0.0; model.n_joints()];
            let zero_d = vec![0.0; model.n_joints()];
            let (a0, qdd) = aba(&model, &kin, &state.joint_vel, &tau, &zero_d, &f_ext).unwrap();
            for q in &qdd {
                assert_abs_diff_eq!(*q, 0.0, epsilon = 1e-9);
            }
            let g_body = state
                .pose
                .root_orientation
                .inverse_transform_vector(&Vector3::new(0.0, 0.0, -9.81));
            assert_relative_eq!(spatial::linear(&a0), g_body, epsilon = 1e-9);
            assert_abs_diff_eq!(spatial::angular(&a0).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn aba_agrees_with_newton_euler_inverse() {
        // Round-trip: forward dynamics then inverse dynamics must recover
        // the torques and leave no residual wrench on the unactuated base.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for model in [testutil::double_pendulum(), testutil::planar_biped()] {
            for _ in 0..25 {
                let state = random_state(&model, &mut rng, 3.0);
                let kin = kin_of(&model, &state);
                let mut f_ext = gravity_f_ext(&model, &kin, 9.81);
                for f in f_ext.iter_mut() {
                    *f += Vector6::from_fn(|_, _| rng.random_range(-5.0..5.0));
                }
                let tau: Vec<f64> = (0..model.n_joints())
                    .map(|_| rng.random_range(-10.0..10.0))
                    .collect();
                let zero_d = vec![0.0; model.n_joints()];
                let (a0, qdd) = aba(&model, &kin, &state.joint_vel, &tau, &zero_d, &f_ext).unwrap();
                let (tau_back, residual) =
                    rnea(&model, &kin, &state.joint_vel, &a0, &qdd, &f_ext);
                for (a, b) in tau.iter().zip(&tau_back) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-7);
                }
                assert_abs_diff_eq!(residual.norm(), 0.0, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn airborne_free_fall_analytic() {
        let model = free_body();
        let params = SimParams::default();
        let mut state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 10.0),
            UnitQuaternion::identity(),
            vec![],
        ));
        for _ in 0..25 {
            let (next, report) = step(&model, &params, &state, &[], 0.0, &[], 0.02).unwrap();
            assert_abs_diff_eq!(report.body_forces[0].norm(), 0.0, epsilon = 1e-12);
            state = next;
        }
        let expected_dz = -0.5 * 9.81 * 0.5 * 0.5;
        let dz = state.pose.root_position.z - 10.0;
        assert_relative_eq!(dz, expected_dz, max_relative = 0.01);
        assert_relative_eq!(
            state.root_lin_acc,
            Vector3::new(0.0, 0.0, -9.81),
            epsilon = 1e-9
        );
    }

    #[test]
    fn resting_contact_supports_weight() {
        let model = free_body();
        let params = SimParams::default();
        // Start at the static equilibrium penetration m g / k.
        let z0 = 0.1 - 1.0 * 9.81 / params.contact.stiffness;
        let mut state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, z0),
            UnitQuaternion::identity(),
            vec![],
        ));
        let mut last = None;
        for _ in 0..50 {
            let (next, report) = step(&model, &params, &state, &[], 0.0, &[], 0.02).unwrap();
            state = next;
            last = Some(report);
        }
        let report = last.unwrap();
        assert_relative_eq!(report.body_forces[0].z, 9.81, max_relative = 0.02);
        assert!(report.body_forces[0].z >= 0.0);
        assert!(state.root_lin_vel.norm() < 1e-3);
    }

    #[test]
    fn zero_gravity_uniform_motion_is_preserved() {
        let model = testutil::double_pendulum();
        let params = SimParams {
            gravity: 0.0,
            ..SimParams::default()
        };
        let mut state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 5.0),
            UnitQuaternion::from_euler_angles(0.3, -0.2, 0.9),
            vec![0.4, -0.6],
        ));
        state.root_lin_vel = Vector3::new(1.0, -0.5, 0.3);
        for _ in 0..10 {
            let before = state.root_lin_vel;
            let (next, _) = step(&model, &params, &state, &[0.4, -0.6], 0.0, &[], 0.02).unwrap();
            state = next;
            assert_relative_eq!(state.root_lin_vel, before, epsilon = 1e-9);
            assert_abs_diff_eq!(state.root_ang_vel.norm(), 0.0, epsilon = 1e-9);
            for qd in &state.joint_vel {
                assert_abs_diff_eq!(*qd, 0.0, epsilon = 1e-9);
            }
        }
    }

    fn linear_momentum(model: &RobotModel, state: &SimState) -> Vector3<f64> {
        body_motions(model, state)
            .unwrap()
            .iter()
            .zip(model.bodies())
            .map(|(m, b)| b.mass * m.com_vel)
            .sum()
    }

    #[test]
    fn momentum_gain_matches_gravity_impulse() {
        // No contact, no disturbance, starting at rest: the only external
        // force is gravity, so dp = M g dt to machine precision.
        let model = testutil::planar_biped();
        let params = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..10 {
            let mut state = random_state(&model, &mut rng, 0.0);
            state.pose.root_position.z = 5.0;
            let p0 = linear_momentum(&model, &state);
            assert_abs_diff_eq!(p0.norm(), 0.0, epsilon = 1e-12);
            let (next, _) = step(
                &model,
                &params,
                &state,
                &state.pose.joints.clone(),
                0.0,
                &[],
                0.02,
            )
            .unwrap();
            let dp = linear_momentum(&model, &next) - p0;
            let expected = Vector3::new(0.0, 0.0, -model.total_mass() * 9.81 * 0.02);
            assert!(
                (dp - expected).norm() < 1e-6 * expected.norm(),
                "dp = {dp:?}, expected {expected:?}"
            );
        }
    }

    #[test]
    fn disturbance_force_changes_momentum() {
        let model = testutil::double_pendulum();
        let params = SimParams {
            gravity: 0.0,
            ..SimParams::default()
        };
        let state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 5.0),
            UnitQuaternion::identity(),
            vec![0.2, -0.3],
        ));
        let push = Wrench {
            body: 2,
            force: Vector3::new(2.0, -1.0, 0.5),
            torque: Vector3::zeros(),
        };
        let (next, _) = step(&model, &params, &state, &[0.2, -0.3], 0.0, &[push], 0.02).unwrap();
        let dp = linear_momentum(&model, &next);
        let expected = push.force * 0.02;
        // Internal articulation makes this only first-order accurate.
        assert!(
            (dp - expected).norm() < 5e-3 * expected.norm(),
            "dp = {dp:?}, expected {expected:?}"
        );
    }

    fn mechanical_energy(model: &RobotModel, params: &SimParams, state: &SimState) -> f64 {
        let motions = body_motions(model, state).unwrap();
        let transforms = model.forward_kinematics(&state.pose).unwrap();
        let mut energy = 0.0;
        for (i, body) in model.bodies().iter().enumerate() {
            let r = transforms[i].rotation.to_rotation_matrix();
            let inertia_world = r.matrix() * body.inertia * r.matrix().transpose();
            energy += 0.5 * body.mass * motions[i].com_vel.norm_squared();
            energy += 0.5 * motions[i].ang_vel.dot(&(inertia_world * motions[i].ang_vel));
            let com_world = transforms[i].transform_point(&body.com.into());
            energy += body.mass * params.gravity * com_world.z;
        }
        // Elastic energy stored in the contact springs.
        for sphere in model.spheres() {
            let center = transforms[sphere.body].transform_point(&sphere.offset.into());
            let penetration = (sphere.radius - center.z).max(0.0);
            energy += 0.5 * params.contact.stiffness * penetration * penetration;
        }
        energy
    }

    #[test]
    fn passive_drop_dissipates_energy() {
        // Zero torque throughout a fall onto the plane: mechanical energy
        // (including contact-spring storage) must never grow between steps
        // beyond the integration-noise budget.
        let model = testutil::planar_biped();
        let params = SimParams::default();
        let orientation = UnitQuaternion::from_euler_angles(0.2, 0.3, 0.0);
        let mut pose = model.default_pose();
        pose.root_orientation = orientation;
        // Drop from 0.05 m above the plane (lowest sphere point).
        let lowest = model
            .sphere_centers(&pose)
            .unwrap()
            .iter()
            .zip(model.spheres())
            .map(|(c, s)| c.z - s.radius)
            .fold(f64::INFINITY, f64::min);
        pose.root_position.z = -lowest + 0.05;
        let mut state = SimState::from_pose(pose);
        let setpoints = state.pose.joints.clone();
        let mut energy = mechanical_energy(&model, &params, &state);
        for _ in 0..75 {
            let (next, _) = step(&model, &params, &state, &setpoints, 0.0, &[], 0.02).unwrap();
            state = next;
            let e = mechanical_energy(&model, &params, &state);
            assert!(
                e <= energy + 1e-3,
                "energy grew from {energy} to {e} at t = {}",
                state.time
            );
            energy = e;
        }
    }

    #[test]
    fn trajectories_are_deterministic() {
        let model = testutil::planar_biped();
        let params = SimParams::default();
        let init = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 0.4),
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.5),
            model.default_pose().joints,
        ));
        let setpoints = model.default_setpoints();
        let run = || {
            let mut s = init.clone();
            for _ in 0..30 {
                let (n, _) = step(&model, &params, &s, &setpoints, 1.0, &[], 0.02).unwrap();
                s = n;
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn contact_report_only_for_touching_bodies() {
        let model = testutil::planar_biped();
        let params = SimParams::default();
        // Position the biped so only the foot spheres penetrate.
        let pose = model.default_pose();
        let centers = model.sphere_centers(&pose).unwrap();
        let lowest = centers
            .iter()
            .zip(model.spheres())
            .map(|(c, s)| c.z - s.radius)
            .fold(f64::INFINITY, f64::min);
        let mut state = SimState::from_pose(pose);
        state.pose.root_position.z = -lowest + 0.002;
        // Descending slightly so feet press in during the step.
        state.root_lin_vel = Vector3::new(0.0, 0.0, -0.05);
        let (_, report) = step(
            &model,
            &params,
            &state,
            &model.default_setpoints(),
            1.0,
            &[],
            0.02,
        )
        .unwrap();
        let mut touched = 0;
        for (i, body) in model.bodies().iter().enumerate() {
            let f = report.body_forces[i];
            if body.name.starts_with("shin") {
                assert!(f.z > 0.0, "foot body {} reported no contact", body.name);
                touched += 1;
            } else {
                assert_abs_diff_eq!(f.norm(), 0.0, epsilon = 1e-12);
            }
            assert!(f.z >= 0.0);
        }
        assert_eq!(touched, 2);
        // Component forces aggregate the leg bodies.
        let legs = model
            .components()
            .iter()
            .position(|c| c.name == "legs")
            .unwrap();
        assert!(report.component_forces[legs].z > 0.0);
        for (c, f) in report.component_forces.iter().enumerate() {
            if c != legs {
                assert_abs_diff_eq!(f.norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn body_motions_match_kinematic_differencing() {
        let model = testutil::double_pendulum();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let state = random_state(&model, &mut rng, 2.0);
        let motions = body_motions(&model, &state).unwrap();
        let eps = 1e-7;
        let mut advanced = state.clone();
        advanced.pose.root_position += eps * state.root_lin_vel;
        advanced.pose.root_orientation = state.pose.root_orientation
            * UnitQuaternion::from_scaled_axis(eps * state.root_ang_vel);
        for (q, qd) in advanced.pose.joints.iter_mut().zip(&state.joint_vel) {
            *q += eps * qd;
        }
        let t0 = model.forward_kinematics(&state.pose).unwrap();
        let t1 = model.forward_kinematics(&advanced.pose).unwrap();
        for (i, body) in model.bodies().iter().enumerate() {
            let c0 = t0[i].transform_point(&body.com.into());
            let c1 = t1[i].transform_point(&body.com.into());
            let fd = (c1 - c0) / eps;
            assert_relative_eq!(fd, motions[i].com_vel, epsilon = 1e-5);
        }
    }

    #[test]
    fn settle_already_at_rest() {
        let model = free_body();
        let params = SimParams::default();
        let z0 = 0.1 - 9.81 / params.contact.stiffness;
        let state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, z0),
            UnitQuaternion::identity(),
            vec![],
        ));
        let (_, settled) =
            settle(&model, &params, &state, 0.0, &[], 2.0, 0.05, 0.5, 0.2).unwrap();
        assert!(settled);
    }

    #[test]
    fn settle_after_small_drop() {
        let model = testutil::planar_biped();
        let params = SimParams::default();
        let pose = model.default_pose();
        let centers = model.sphere_centers(&pose).unwrap();
        let lowest = centers
            .iter()
            .zip(model.spheres())
            .map(|(c, s)| c.z - s.radius)
            .fold(f64::INFINITY, f64::min);
        let mut state = SimState::from_pose(pose);
        state.pose.root_position.z = -lowest + 0.04;
        let setpoints = model.default_setpoints();
        let (rest, settled) = settle(
            &model, &params, &state, 10.0, &setpoints, 10.0, 0.05, 0.5, 0.3,
        )
        .unwrap();
        assert!(settled, "biped failed to come to rest");
        let motions = body_motions(&model, &rest).unwrap();
        for m in motions {
            assert!(m.com_vel.norm() < 0.05);
            assert!(m.ang_vel.norm() < 0.5);
        }
    }

    #[test]
    fn settle_zero_budget_returns_unchanged() {
        let model = free_body();
        let params = SimParams::default();
        let state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 1.0),
            UnitQuaternion::identity(),
            vec![],
        ));
        let (out, settled) =
            settle(&model, &params, &state, 0.0, &[], 0.0, 0.05, 0.5, 0.2).unwrap();
        assert!(!settled);
        assert_eq!(out, state);
    }

    #[test]
    fn non_finite_state_is_an_integration_error() {
        let model = free_body();
        let params = SimParams::default();
        let mut state = SimState::from_pose(Pose::new(
            Vector3::new(f64::NAN, 0.0, 1.0),
            UnitQuaternion::identity(),
            vec![],
        ));
        state.time = 1.25;
        let err = step(&model, &params, &state, &[], 0.0, &[], 0.02).unwrap_err();
        match err {
            SimError::NonFinite { time } => assert!(time > 1.25),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn absurd_stiffness_diverges_with_error() {
        // An off-center sphere turns the enormous penalty force into an
        // equally enormous torque; the velocity-product terms then overflow
        // and the step must report the failure instead of returning garbage.
        let model = RobotModel::new(
            vec![Body {
                name: "ball".to_string(),
                parent: None,
                attach_translation: Vector3::zeros(),
                attach_rotation: UnitQuaternion::identity(),
                joint: None,
                mass: 1.0,
                com: Vector3::zeros(),
                inertia: Matrix3::from_diagonal(&Vector3::new(0.004, 0.004, 0.004)),
                component: 0,
            }],
            vec![],
            vec![CollisionSphere {
                body: 0,
                offset: Vector3::new(0.05, 0.0, 0.0),
                radius: 0.1,
            }],
            vec![Component {
                name: "all".to_string(),
                weight: 1.0,
            }],
        )
        .unwrap();
        let params = SimParams {
            contact: ContactParams {
                stiffness: 1e300,
                damping: 0.0,
                friction: 0.8,
            },
            ..SimParams::default()
        };
        let mut state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 0.05),
            UnitQuaternion::identity(),
            vec![],
        ));
        state.root_lin_vel = Vector3::new(0.0, 0.0, -3.0);
        let mut failed = false;
        for _ in 0..100 {
            match step(&model, &params, &state, &[], 0.0, &[], 0.02) {
                Ok((next, _)) => state = next,
                Err(SimError::NonFinite { .. }) => {
                    failed = true;
                    break;
                }
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
        assert!(failed, "expected the integrator to report divergence");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let model = testutil::pendulum();
        let params = SimParams::default();
        let state = SimState::from_pose(model.default_pose());
        assert!(matches!(
            step(&model, &params, &state, &[0.0, 1.0], 1.0, &[], 0.02),
            Err(SimError::Model(ModelError::DimensionMismatch { .. }))
        ));
        let bad = Wrench {
            body: 99,
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        };
        assert!(matches!(
            step(&model, &params, &state, &[0.0], 1.0, &[bad], 0.02),
            Err(SimError::BodyOutOfRange { body: 99 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn rollouts_respect_limits_and_stay_normalized(seed in 0u64..1_000) {
            let model = testutil::planar_biped();
            let params = SimParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = random_state(&model, &mut rng, 1.0);
            state.pose.root_position.z = rng.random_range(0.3..0.6);
            let setpoints: Vec<f64> = model
                .joints()
                .iter()
                .map(|j| rng.random_range(j.lower..=j.upper))
                .collect();
            for _ in 0..25 {
                let (next, _) =
                    step(&model, &params, &state, &setpoints, 1.0, &[], 0.02).unwrap();
                state = next;
                prop_assert!(model.within_limits(&state.pose.joints).unwrap());
                prop_assert!((state.pose.root_orientation.coords.norm() - 1.0).abs() < 1e-9);
                for (qd, j) in state.joint_vel.iter().zip(model.joints()) {
                    prop_assert!(qd.abs() <= j.velocity_limit + 1e-12);
                }
                prop_assert!(state.is_finite());
            }
        }
    }
}
