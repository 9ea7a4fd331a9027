//! Robot descriptions as TOML files.
//!
//! The on-disk form is written for hand authoring: bodies reference their
//! parent and component by name, joints are declared inline on the body
//! they drive, and rotations are roll-pitch-yaw triples. Conversion to a
//! [`RobotModel`] resolves names to indices and numbers joints in body
//! order; the model's own validation then applies.
//!
//! A model's identity is the SHA-256 of its canonical re-serialization, so
//! formatting and comments do not change the hash but any numeric edit
//! does. Other artifacts (pose datasets, checkpoints, reports) embed this
//! hash to declare which robot they belong to.

use std::path::Path;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use softfall_core::model::{Body, CollisionSphere, Component, Joint, RobotModel};

use crate::{content_hash, read_to_string, write_file, ToolError};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Top-level TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub name: String,
    pub components: Vec<ComponentEntry>,
    pub bodies: Vec<BodyEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyEntry {
    pub name: String,
    /// Parent body name; omitted only for the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Attachment origin in the parent frame, m.
    #[serde(default)]
    pub attach: [f64; 3],
    /// Fixed attachment rotation as roll-pitch-yaw, rad.
    #[serde(default)]
    pub attach_rpy: [f64; 3],
    /// Mass, kg.
    pub mass: f64,
    /// Center of mass in the body frame, m.
    #[serde(default)]
    pub com: [f64; 3],
    /// Rotational inertia about the center of mass: either 3 diagonal
    /// entries `[xx, yy, zz]` or 6 entries `[xx, yy, zz, xy, xz, yz]`.
    pub inertia: Vec<f64>,
    /// Component name.
    pub component: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spheres: Vec<SphereEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    /// Rotation axis in the child body frame; normalized on conversion.
    pub axis: [f64; 3],
    /// Position limits `[lower, upper]`, rad.
    pub limits: [f64; 2],
    /// Velocity limit, rad/s.
    pub velocity_limit: f64,
    /// Torque limit, N·m.
    pub torque_limit: f64,
    pub kp: f64,
    pub kd: f64,
    /// Default setpoint, rad.
    #[serde(default)]
    pub setpoint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereEntry {
    /// Center offset in the body frame, m.
    #[serde(default)]
    pub offset: [f64; 3],
    /// Radius, m.
    pub radius: f64,
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl ModelFile {
    /// Resolves names, numbers joints in body order, and builds the
    /// validated model.
    pub fn to_model(&self) -> Result<RobotModel, ToolError> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(ToolError::Data(format!(
                "model format version {} (this build reads {MODEL_FORMAT_VERSION})",
                self.version
            )));
        }
        let component_index = |name: &str| {
            self.components
                .iter()
                .position(|c| c.name == name)
                .ok_or_else(|| ToolError::Data(format!("unknown component {name:?}")))
        };
        let body_index = |name: &str, before: usize| {
            self.bodies[..before]
                .iter()
                .position(|b| b.name == name)
                .ok_or_else(|| {
                    ToolError::Data(format!(
                        "body {:?} references parent {name:?}, which is not an earlier body",
                        self.bodies[before].name
                    ))
                })
        };
        let mut bodies = Vec::with_capacity(self.bodies.len());
        let mut joints = Vec::new();
        let mut spheres = Vec::new();
        for (i, entry) in self.bodies.iter().enumerate() {
            let parent = match &entry.parent {
                Some(name) => Some(body_index(name, i)?),
                None => None,
            };
            let joint = match &entry.joint {
                Some(j) => {
                    let axis = vec3(j.axis);
                    if axis.norm() == 0.0 {
                        return Err(ToolError::Data(format!(
                            "body {:?} has a zero joint axis",
                            entry.name
                        )));
                    }
                    joints.push(Joint {
                        axis: Unit::new_normalize(axis),
                        lower: j.limits[0],
                        upper: j.limits[1],
                        velocity_limit: j.velocity_limit,
                        torque_limit: j.torque_limit,
                        kp: j.kp,
                        kd: j.kd,
                        setpoint_default: j.setpoint,
                    });
                    Some(joints.len() - 1)
                }
                None => None,
            };
            for sphere in &entry.spheres {
                spheres.push(CollisionSphere {
                    body: i,
                    offset: vec3(sphere.offset),
                    radius: sphere.radius,
                });
            }
            let [roll, pitch, yaw] = entry.attach_rpy;
            bodies.push(Body {
                name: entry.name.clone(),
                parent,
                attach_translation: vec3(entry.attach),
                attach_rotation: UnitQuaternion::from_euler_angles(roll, pitch, yaw),
                joint,
                mass: entry.mass,
                com: vec3(entry.com),
                inertia: inertia_from_entries(&entry.inertia)
                    .ok_or_else(|| ToolError::Data(format!(
                        "body {:?} inertia needs 3 or 6 entries, got {}",
                        entry.name,
                        entry.inertia.len()
                    )))?,
                component: component_index(&entry.component)?,
            });
        }
        let components = self
            .components
            .iter()
            .map(|c| Component {
                name: c.name.clone(),
                weight: c.weight,
            })
            .collect();
        Ok(RobotModel::new(bodies, joints, spheres, components)?)
    }

    /// The inverse of [`ModelFile::to_model`], used to re-emit edited
    /// models (for example after a component-weight change).
    pub fn from_model(name: &str, model: &RobotModel) -> Self {
        let bodies = model
            .bodies()
            .iter()
            .enumerate()
            .map(|(i, body)| {
                let (roll, pitch, yaw) = body.attach_rotation.euler_angles();
                BodyEntry {
                    name: body.name.clone(),
                    parent: body.parent.map(|p| model.bodies()[p].name.clone()),
                    attach: arr3(&body.attach_translation),
                    attach_rpy: [roll, pitch, yaw],
                    mass: body.mass,
                    com: arr3(&body.com),
                    inertia: inertia_to_entries(&body.inertia),
                    component: model.components()[body.component].name.clone(),
                    joint: body.joint.map(|j| {
                        let joint = &model.joints()[j];
                        JointEntry {
                            axis: arr3(&joint.axis),
                            limits: [joint.lower, joint.upper],
                            velocity_limit: joint.velocity_limit,
                            torque_limit: joint.torque_limit,
                            kp: joint.kp,
                            kd: joint.kd,
                            setpoint: joint.setpoint_default,
                        }
                    }),
                    spheres: model
                        .spheres()
                        .iter()
                        .filter(|s| s.body == i)
                        .map(|s| SphereEntry {
                            offset: arr3(&s.offset),
                            radius: s.radius,
                        })
                        .collect(),
                }
            })
            .collect();
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            name: name.to_string(),
            components: model
                .components()
                .iter()
                .map(|c| ComponentEntry {
                    name: c.name.clone(),
                    weight: c.weight,
                })
                .collect(),
            bodies,
        }
    }

    /// Identity hash: SHA-256 over the canonical serialization, so it
    /// survives reformatting but not value changes.
    pub fn hash(&self) -> String {
        content_hash(&toml::to_string(self).expect("model files serialize"))
    }
}

fn inertia_from_entries(entries: &[f64]) -> Option<Matrix3<f64>> {
    match entries {
        [xx, yy, zz] => Some(Matrix3::from_diagonal(&Vector3::new(*xx, *yy, *zz))),
        [xx, yy, zz, xy, xz, yz] => Some(Matrix3::new(
            *xx, *xy, *xz, //
            *xy, *yy, *yz, //
            *xz, *yz, *zz,
        )),
        _ => None,
    }
}

fn inertia_to_entries(inertia: &Matrix3<f64>) -> Vec<f64> {
    let (xy, xz, yz) = (inertia[(0, 1)], inertia[(0, 2)], inertia[(1, 2)]);
    let diag = vec![inertia[(0, 0)], inertia[(1, 1)], inertia[(2, 2)]];
    if xy == 0.0 && xz == 0.0 && yz == 0.0 {
        diag
    } else {
        let mut full = diag;
        full.extend([xy, xz, yz]);
        full
    }
}

/// Parses a model file and builds the validated model; returns the parsed
/// document too so callers can take its hash or re-emit it.
pub fn load_model(path: &Path) -> Result<(ModelFile, RobotModel), ToolError> {
    let text = read_to_string(path)?;
    let file: ModelFile =
        toml::from_str(&text).map_err(|e| ToolError::data_in(path, e.message()))?;
    let model = file
        .to_model()
        .map_err(|e| ToolError::Data(format!("{}: {e}", path.display())))?;
    Ok((file, model))
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<(), ToolError> {
    let text = toml::to_string(file)
        .map_err(|e| ToolError::Runtime(format!("serializing model: {e}")))?;
    write_file(path, &text)
}
