//! Hand-built robot fixtures shared by the unit tests. Kept small enough
//! that expected kinematics and dynamics can be derived by hand.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};

use crate::model::{Body, CollisionSphere, Component, Joint, ModelError, RobotModel};

fn diag(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(x, y, z))
}

fn pendulum_parts() -> (Vec<Body>, Vec<Joint>, Vec<CollisionSphere>, Vec<Component>) {
    let bodies = vec![
        Body {
            name: "base".to_string(),
            parent: None,
            attach_translation: Vector3::zeros(),
            attach_rotation: UnitQuaternion::identity(),
            joint: None,
            mass: 1.0,
            com: Vector3::zeros(),
            inertia: diag(0.004, 0.004, 0.004),
            component: 0,
        },
        Body {
            name: "bob".to_string(),
            parent: Some(0),
            attach_translation: Vector3::new(0.0, 0.0, -0.1),
            attach_rotation: UnitQuaternion::identity(),
            joint: Some(0),
            mass: 1.0,
            com: Vector3::new(0.0, 0.0, -0.15),
            inertia: diag(0.0075, 0.0075, 0.0005),
            component: 0,
        },
    ];
    let joints = vec![Joint {
        axis: Unit::new_normalize(Vector3::y()),
        lower: -3.0,
        upper: 3.0,
        velocity_limit: 30.0,
        torque_limit: 30.0,
        kp: 20.0,
        kd: 0.5,
        setpoint_default: 0.0,
    }];
    let spheres = vec![
        CollisionSphere {
            body: 0,
            offset: Vector3::zeros(),
            radius: 0.05,
        },
        CollisionSphere {
            body: 1,
            offset: Vector3::new(0.0, 0.0, -0.15),
            radius: 0.05,
        },
    ];
    let components = vec![Component {
        name: "all".to_string(),
        weight: 1.0,
    }];
    (bodies, joints, spheres, components)
}

/// Floating base with a single hanging pendulum link (pitch axis).
pub fn pendulum() -> RobotModel {
    let (b, j, s, c) = pendulum_parts();
    RobotModel::new(b, j, s, c).expect("pendulum fixture is valid")
}

/// Pendulum with a caller-supplied tweak, for exercising validation errors.
pub fn pendulum_with(
    f: impl FnOnce(&mut Vec<Body>, &mut Vec<Joint>),
) -> Result<RobotModel, ModelError> {
    let (mut b, mut j, s, c) = pendulum_parts();
    f(&mut b, &mut j);
    RobotModel::new(b, j, s, c)
}

/// Pendulum whose link extends along +x and hinges about z, for kinematics
/// cases worked out by hand in the xy-plane.
pub fn pendulum_xz() -> RobotModel {
    let (mut b, mut j, mut s, c) = pendulum_parts();
    b[1].attach_translation = Vector3::zeros();
    b[1].com = Vector3::new(0.5, 0.0, 0.0);
    b[1].inertia = diag(0.0005, 1.0 / 12.0, 1.0 / 12.0);
    j[0].axis = Unit::new_normalize(Vector3::z());
    s[1].offset = Vector3::new(0.5, 0.0, 0.0);
    RobotModel::new(b, j, s, c).expect("pendulum_xz fixture is valid")
}

/// Floating base with a two-link chain whose attachment frames carry fixed
/// rotations, so kinematics tests cover the full transform composition.
pub fn double_pendulum() -> RobotModel {
    let bodies = vec![
        Body {
            name: "base".to_string(),
            parent: None,
            attach_translation: Vector3::zeros(),
            attach_rotation: UnitQuaternion::identity(),
            joint: None,
            mass: 1.2,
            com: Vector3::zeros(),
            inertia: diag(0.005, 0.005, 0.005),
            component: 0,
        },
        Body {
            name: "link1".to_string(),
            parent: Some(0),
            attach_translation: Vector3::new(0.0, 0.0, -0.1),
            attach_rotation: UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.2),
            joint: Some(0),
            mass: 0.8,
            com: Vector3::new(0.0, 0.0, -0.15),
            inertia: diag(0.006, 0.006, 0.0004),
            component: 0,
        },
        Body {
            name: "link2".to_string(),
            parent: Some(1),
            attach_translation: Vector3::new(0.0, 0.0, -0.3),
            attach_rotation: UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -0.4),
            joint: Some(1),
            mass: 0.5,
            com: Vector3::new(0.0, 0.0, -0.12),
            inertia: diag(0.003, 0.003, 0.0002),
            component: 0,
        },
    ];
    let joints = vec![
        Joint {
            axis: Unit::new_normalize(Vector3::y()),
            lower: -3.0,
            upper: 3.0,
            velocity_limit: 30.0,
            torque_limit: 30.0,
            kp: 15.0,
            kd: 0.4,
            setpoint_default: 0.0,
        },
        Joint {
            axis: Unit::new_normalize(Vector3::x()),
            lower: -3.0,
            upper: 3.0,
            velocity_limit: 30.0,
            torque_limit: 30.0,
            kp: 10.0,
            kd: 0.3,
            setpoint_default: 0.0,
        },
    ];
    let spheres = vec![
        CollisionSphere {
            body: 0,
            offset: Vector3::zeros(),
            radius: 0.03,
        },
        CollisionSphere {
            body: 2,
            offset: Vector3::new(0.0, 0.0, -0.12),
            radius: 0.03,
        },
    ];
    let components = vec![Component {
        name: "all".to_string(),
        weight: 1.0,
    }];
    RobotModel::new(bodies, joints, spheres, components).expect("double_pendulum fixture is valid")
}

/// Six-joint sagittal-plane biped: trunk root with welded head and battery,
/// two-segment legs, and single-segment arms. All joints pitch about y.
pub fn planar_biped() -> RobotModel {
    let mut bodies = vec![Body {
        name: "trunk".to_string(),
        parent: None,
        attach_translation: Vector3::zeros(),
        attach_rotation: UnitQuaternion::identity(),
        joint: None,
        mass: 6.0,
        com: Vector3::new(0.0, 0.0, 0.05),
        inertia: diag(0.05, 0.05, 0.01),
        component: 0,
    }];
    let mut spheres = vec![
        CollisionSphere {
            body: 0,
            offset: Vector3::new(0.0, 0.0, -0.02),
            radius: 0.07,
        },
        CollisionSphere {
            body: 0,
            offset: Vector3::new(0.0, 0.0, 0.16),
            radius: 0.08,
        },
    ];
    // Welded head and battery.
    bodies.push(Body {
        name: "head".to_string(),
        parent: Some(0),
        attach_translation: Vector3::new(0.0, 0.0, 0.25),
        attach_rotation: UnitQuaternion::identity(),
        joint: None,
        mass: 1.0,
        com: Vector3::new(0.0, 0.0, 0.05),
        inertia: diag(0.0015, 0.0015, 0.0015),
        component: 1,
    });
    spheres.push(CollisionSphere {
        body: 1,
        offset: Vector3::new(0.0, 0.0, 0.05),
        radius: 0.06,
    });
    bodies.push(Body {
        name: "battery".to_string(),
        parent: Some(0),
        attach_translation: Vector3::new(-0.08, 0.0, 0.08),
        attach_rotation: UnitQuaternion::identity(),
        joint: None,
        mass: 1.0,
        com: Vector3::zeros(),
        inertia: diag(0.002, 0.002, 0.002),
        component: 4,
    });
    spheres.push(CollisionSphere {
        body: 2,
        offset: Vector3::zeros(),
        radius: 0.05,
    });
    let mut joints = Vec::new();
    // Legs: hip + knee per side.
    for (side, sy) in [("l", 1.0), ("r", -1.0)] {
        let thigh = bodies.len();
        bodies.push(Body {
            name: alloc::format!("thigh_{side}"),
            parent: Some(0),
            attach_translation: Vector3::new(0.0, sy * 0.06, 0.0),
            attach_rotation: UnitQuaternion::identity(),
            joint: Some(joints.len()),
            mass: 1.5,
            com: Vector3::new(0.0, 0.0, -0.1),
            inertia: diag(0.005, 0.005, 0.0005),
            component: 3,
        });
        joints.push(Joint {
            axis: Unit::new_normalize(Vector3::y()),
            lower: -2.0,
            upper: 2.0,
            velocity_limit: 25.0,
            torque_limit: 40.0,
            kp: 15.0,
            kd: 0.8,
            setpoint_default: -0.2,
        });
        spheres.push(CollisionSphere {
            body: thigh,
            offset: Vector3::new(0.0, 0.0, -0.1),
            radius: 0.05,
        });
        let shin = bodies.len();
        bodies.push(Body {
            name: alloc::format!("shin_{side}"),
            parent: Some(thigh),
            attach_translation: Vector3::new(0.0, 0.0, -0.2),
            attach_rotation: UnitQuaternion::identity(),
            joint: Some(joints.len()),
            mass: 1.0,
            com: Vector3::new(0.0, 0.0, -0.1),
            inertia: diag(0.0033, 0.0033, 0.0003),
            component: 3,
        });
        joints.push(Joint {
            axis: Unit::new_normalize(Vector3::y()),
            lower: 0.0,
            upper: 2.6,
            velocity_limit: 25.0,
            torque_limit: 40.0,
            kp: 15.0,
            kd: 0.8,
            setpoint_default: 0.3,
        });
        spheres.push(CollisionSphere {
            body: shin,
            offset: Vector3::new(0.0, 0.0, -0.1),
            radius: 0.04,
        });
        spheres.push(CollisionSphere {
            body: shin,
            offset: Vector3::new(0.0, 0.0, -0.2),
            radius: 0.045,
        });
    }
    // Arms: one segment per side.
    for (side, sy) in [("l", 1.0), ("r", -1.0)] {
        let arm = bodies.len();
        bodies.push(Body {
            name: alloc::format!("arm_{side}"),
            parent: Some(0),
            attach_translation: Vector3::new(0.0, sy * 0.09, 0.24),
            attach_rotation: UnitQuaternion::identity(),
            joint: Some(joints.len()),
            mass: 0.8,
            com: Vector3::new(0.0, 0.0, -0.15),
            inertia: diag(0.006, 0.006, 0.0004),
            component: 2,
        });
        joints.push(Joint {
            axis: Unit::new_normalize(Vector3::y()),
            lower: -3.0,
            upper: 3.0,
            velocity_limit: 25.0,
            torque_limit: 25.0,
            kp: 12.0,
            kd: 0.6,
            setpoint_default: -0.6,
        });
        spheres.push(CollisionSphere {
            body: arm,
            offset: Vector3::new(0.0, 0.0, -0.15),
            radius: 0.04,
        });
        spheres.push(CollisionSphere {
            body: arm,
            offset: Vector3::new(0.0, 0.0, -0.3),
            radius: 0.04,
        });
    }
    let components = vec![
        Component {
            name: "torso".to_string(),
            weight: 1.0,
        },
        Component {
            name: "head".to_string(),
            weight: 4.0,
        },
        Component {
            name: "arms".to_string(),
            weight: 2.0,
        },
        Component {
            name: "legs".to_string(),
            weight: 1.0,
        },
        Component {
            name: "battery".to_string(),
            weight: 1.0,
        },
    ];
    RobotModel::new(bodies, joints, spheres, components).expect("planar_biped fixture is valid")
}
