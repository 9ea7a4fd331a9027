//! Pose dataset files: generated end poses with the provenance needed to
//! regenerate them bit-for-bit, plus hand-authored pose sets.
//!
//! A dataset file is pretty-printed JSON. The header records the format
//! version, the model hash, the generation seed and parameters, and the
//! split role; the body is one entry per pose. Generated files written
//! from the same model, seed, and parameters are byte-identical.
//!
//! Loading re-validates every pose against the model — joint limits,
//! self-collision at the stored configuration, quaternion normalization,
//! and the orientation bin — so a corrupted or mismatched file fails
//! before any training or evaluation consumes it.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use softfall_core::model::{Pose, RobotModel};
use softfall_core::posegen::{orientation_bin, EndPose, GenParams, PoseDataset, PoseSource};

use crate::{content_hash, read_to_string, write_file, ToolError};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DATASET_KIND: &str = "softfall-poses";

/// Which slice of the generated poses a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    /// Every generated pose.
    Full,
    Train,
    Test,
    /// Hand-written poses; generation metadata is absent.
    Authored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParamsEntry {
    pub n_bins: usize,
    pub balance_ratio: f64,
    pub drop_height: f64,
    pub frozen_gain: f64,
    pub settle_max_time: f64,
    pub lin_tol: f64,
    pub ang_tol: f64,
    pub hold_time: f64,
    pub attempts_per_pose: usize,
}

impl From<&GenParams> for GenParamsEntry {
    fn from(p: &GenParams) -> Self {
        Self {
            n_bins: p.n_bins,
            balance_ratio: p.balance_ratio,
            drop_height: p.drop_height,
            frozen_gain: p.frozen_gain,
            settle_max_time: p.settle_max_time,
            lin_tol: p.lin_tol,
            ang_tol: p.ang_tol,
            hold_time: p.hold_time,
            attempts_per_pose: p.attempts_per_pose,
        }
    }
}

impl From<&GenParamsEntry> for GenParams {
    fn from(p: &GenParamsEntry) -> Self {
        Self {
            n_bins: p.n_bins,
            balance_ratio: p.balance_ratio,
            drop_height: p.drop_height,
            frozen_gain: p.frozen_gain,
            settle_max_time: p.settle_max_time,
            lin_tol: p.lin_tol,
            ang_tol: p.ang_tol,
            hold_time: p.hold_time,
            attempts_per_pose: p.attempts_per_pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    /// Root orientation quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
    /// Joint angles, rad.
    pub joints: Vec<f64>,
    /// Orientation bin; recomputed on load when omitted (authored files),
    /// verified otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin: Option<usize>,
    pub source: PoseSourceEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSourceEntry {
    Generated,
    Authored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    pub kind: String,
    /// Hash of the model these poses were settled on.
    pub model_hash: String,
    pub role: SplitRole,
    pub seed: u64,
    pub params: GenParamsEntry,
    /// False when generation ran out of attempts before the target count.
    pub complete: bool,
    pub bin_histogram: Vec<usize>,
    pub poses: Vec<PoseEntry>,
}

fn pose_entry(pose: &EndPose) -> PoseEntry {
    let q = pose.root_orientation.quaternion();
    PoseEntry {
        orientation: [q.w, q.i, q.j, q.k],
        joints: pose.joints.clone(),
        bin: Some(pose.bin),
        source: match pose.source {
            PoseSource::Generated => PoseSourceEntry::Generated,
            PoseSource::Authored => PoseSourceEntry::Authored,
        },
    }
}

fn histogram_of(poses: &[EndPose], n_bins: usize) -> Vec<usize> {
    let mut histogram = vec![0usize; n_bins.clamp(1, 26)];
    for pose in poses {
        histogram[pose.bin] += 1;
    }
    histogram
}

impl DatasetFile {
    /// Wraps generated poses with their provenance.
    pub fn from_poses(
        poses: &[EndPose],
        role: SplitRole,
        model_hash: &str,
        seed: u64,
        params: &GenParams,
        complete: bool,
    ) -> Self {
        DatasetFile {
            version: DATASET_FORMAT_VERSION,
            kind: DATASET_KIND.to_string(),
            model_hash: model_hash.to_string(),
            role,
            seed,
            params: params.into(),
            complete,
            bin_histogram: histogram_of(poses, params.n_bins),
            poses: poses.iter().map(pose_entry).collect(),
        }
    }

    /// Wraps hand-written goal poses. Bins are computed here; the seed and
    /// generation parameters are placeholders (authored sets have none).
    pub fn authored(poses: &[EndPose], model_hash: &str) -> Self {
        let params = GenParams::default();
        let binned: Vec<EndPose> = poses
            .iter()
            .map(|p| EndPose {
                bin: orientation_bin(&p.root_orientation, params.n_bins),
                source: PoseSource::Authored,
                ..p.clone()
            })
            .collect();
        let mut file = Self::from_poses(&binned, SplitRole::Authored, model_hash, 0, &params, true);
        for entry in &mut file.poses {
            entry.bin = None;
        }
        file
    }

    /// Re-validates every pose against `model` and returns the usable goal
    /// list. `expected_model_hash` is the hash of the model the caller
    /// actually loaded; a mismatch is a data error.
    pub fn to_poses(
        &self,
        model: &RobotModel,
        expected_model_hash: &str,
    ) -> Result<Vec<EndPose>, ToolError> {
        if self.version != DATASET_FORMAT_VERSION {
            return Err(ToolError::Data(format!(
                "pose dataset format version {} (this build reads {DATASET_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.kind != DATASET_KIND {
            return Err(ToolError::Data(format!(
                "not a pose dataset (kind {:?})",
                self.kind
            )));
        }
        if self.model_hash != expected_model_hash {
            return Err(ToolError::Data(
                "pose dataset belongs to a different model".to_string(),
            ));
        }
        let n_bins = self.params.n_bins;
        let mut poses = Vec::with_capacity(self.poses.len());
        for (i, entry) in self.poses.iter().enumerate() {
            let [w, x, y, z] = entry.orientation;
            let q = Quaternion::new(w, x, y, z);
            if (q.norm() - 1.0).abs() > 1e-9 {
                return Err(ToolError::Data(format!(
                    "pose {i}: orientation is not a unit quaternion"
                )));
            }
            // Renormalizing would perturb the last bit and break the
            // bit-exact reload contract; the norm was just checked.
            let orientation = UnitQuaternion::new_unchecked(q);
            if entry.joints.len() != model.n_joints() {
                return Err(ToolError::Data(format!(
                    "pose {i}: {} joint angles for a {}-joint model",
                    entry.joints.len(),
                    model.n_joints()
                )));
            }
            if !model.within_limits(&entry.joints).map_err(ToolError::from)? {
                return Err(ToolError::Data(format!(
                    "pose {i}: joint angles violate the model's limits"
                )));
            }
            let pose = Pose::new(nalgebra::Vector3::zeros(), orientation, entry.joints.clone());
            if model.self_collision(&pose).map_err(ToolError::from)? {
                return Err(ToolError::Data(format!("pose {i}: self-collision")));
            }
            let bin = orientation_bin(&orientation, n_bins);
            if let Some(stored) = entry.bin {
                if stored != bin {
                    return Err(ToolError::Data(format!(
                        "pose {i}: stored bin {stored} but orientation bins to {bin}"
                    )));
                }
            }
            poses.push(EndPose {
                root_orientation: orientation,
                joints: entry.joints.clone(),
                bin,
                source: match entry.source {
                    PoseSourceEntry::Generated => PoseSource::Generated,
                    PoseSourceEntry::Authored => PoseSource::Authored,
                },
            });
        }
        if poses.is_empty() {
            return Err(ToolError::Data("pose dataset is empty".to_string()));
        }
        Ok(poses)
    }

    /// Canonical serialization: pretty JSON plus a trailing newline.
    pub fn to_canonical_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("dataset files serialize");
        text.push('\n');
        text
    }

    /// Identity hash of the file contents; checkpoints record the hash of
    /// their training split so evaluation can reject the same file later.
    pub fn hash(&self) -> String {
        content_hash(&self.to_canonical_string())
    }
}

/// Splits generated poses into train and test files. Test poses are spread
/// evenly through the generation order (every k-th pose, k = n / n_test),
/// which keeps both splits close to the full set's bin balance; the splits
/// partition the input exactly.
pub fn split_dataset(
    dataset: &PoseDataset,
    n_test: usize,
    model_hash: &str,
) -> Result<(DatasetFile, DatasetFile), ToolError> {
    let n = dataset.poses.len();
    if n_test == 0 || n_test >= n {
        return Err(ToolError::Usage(format!(
            "cannot carve {n_test} test poses out of {n} generated"
        )));
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (i, pose) in dataset.poses.iter().enumerate() {
        // Pose i goes to the test split when the (scaled) test quota
        // increments at i: exactly n_test poses, evenly spaced.
        if (i + 1) * n_test / n > i * n_test / n {
            test.push(pose.clone());
        } else {
            train.push(pose.clone());
        }
    }
    let make = |poses: &[EndPose], role| {
        DatasetFile::from_poses(
            poses,
            role,
            model_hash,
            dataset.seed,
            &dataset.params,
            dataset.complete,
        )
    };
    Ok((make(&train, SplitRole::Train), make(&test, SplitRole::Test)))
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile, ToolError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ToolError::data_in(path, e))
}

pub fn save_dataset(path: &Path, file: &DatasetFile) -> Result<(), ToolError> {
    write_file(path, &file.to_canonical_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use softfall_core::dynamics::SimParams;
    use softfall_core::posegen::generate_dataset;

    fn pendulum() -> (crate::model_file::ModelFile, RobotModel) {
        let file = crate::model_file::ModelFile::from_model(
            "pendulum",
            &pendulum_model(),
        );
        let model = file.to_model().unwrap();
        (file, model)
    }

    fn pendulum_model() -> RobotModel {
        // Same two-body pendulum the core fixtures use; built through the
        // file form so the dataset tests exercise the real loading path.
        let text = r#"
version = 1
name = "pendulum"

[[components]]
name = "all"
weight = 1.0

[[bodies]]
name = "base"
mass = 1.0
inertia = [0.004, 0.004, 0.004]
component = "all"

[[bodies.spheres]]
radius = 0.05

[[bodies]]
name = "bob"
parent = "base"
attach = [0.0, 0.0, -0.1]
mass = 1.0
com = [0.0, 0.0, -0.15]
inertia = [0.0075, 0.0075, 0.0005]
component = "all"

[bodies.joint]
axis = [0.0, 1.0, 0.0]
limits = [-3.0, 3.0]
velocity_limit = 30.0
torque_limit = 30.0
kp = 20.0
kd = 0.5

[[bodies.spheres]]
offset = [0.0, 0.0, -0.15]
radius = 0.05
"#;
        let file: crate::model_file::ModelFile = toml::from_str(text).unwrap();
        file.to_model().unwrap()
    }

    fn quick_params() -> GenParams {
        GenParams {
            settle_max_time: 3.0,
            hold_time: 0.1,
            attempts_per_pose: 50,
            ..GenParams::default()
        }
    }

    fn small_dataset(seed: u64) -> PoseDataset {
        let (_, model) = pendulum();
        generate_dataset(&model, &SimParams::default(), 12, &quick_params(), seed)
    }

    #[test]
    fn generated_files_round_trip_and_revalidate() {
        let (file, model) = pendulum();
        let hash = file.hash();
        let dataset = small_dataset(5);
        assert!(dataset.complete);
        let on_disk = DatasetFile::from_poses(
            &dataset.poses,
            SplitRole::Full,
            &hash,
            dataset.seed,
            &dataset.params,
            dataset.complete,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.json");
        save_dataset(&path, &on_disk).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, on_disk);
        let poses = loaded.to_poses(&model, &hash).unwrap();
        assert_eq!(poses, dataset.poses);
    }

    #[test]
    fn regeneration_with_the_same_seed_is_byte_identical() {
        let (file, _) = pendulum();
        let hash = file.hash();
        let wrap = |d: &PoseDataset| {
            DatasetFile::from_poses(&d.poses, SplitRole::Full, &hash, d.seed, &d.params, d.complete)
                .to_canonical_string()
        };
        let a = wrap(&small_dataset(9));
        let b = wrap(&small_dataset(9));
        assert_eq!(a, b);
        let c = wrap(&small_dataset(10));
        assert_ne!(a, c);
    }

    #[test]
    fn split_partitions_the_poses_and_tags_roles() {
        let (file, _) = pendulum();
        let dataset = small_dataset(5);
        let n = dataset.poses.len();
        let (train, test) = split_dataset(&dataset, 3, &file.hash()).unwrap();
        assert_eq!(train.role, SplitRole::Train);
        assert_eq!(test.role, SplitRole::Test);
        assert_eq!(test.poses.len(), 3);
        assert_eq!(train.poses.len() + test.poses.len(), n);
        // Disjoint by construction: the two files differ, and so do their
        // hashes, which is the check evaluation relies on.
        assert_ne!(train.hash(), test.hash());
        assert!(split_dataset(&dataset, 0, "h").is_err());
        assert!(split_dataset(&dataset, n, "h").is_err());
    }

    #[test]
    fn corrupted_poses_fail_validation_on_load() {
        let (file, model) = pendulum();
        let hash = file.hash();
        let dataset = small_dataset(6);
        let base = DatasetFile::from_poses(
            &dataset.poses,
            SplitRole::Full,
            &hash,
            dataset.seed,
            &dataset.params,
            true,
        );

        let mut out_of_limits = base.clone();
        out_of_limits.poses[0].joints[0] = 99.0;
        assert!(out_of_limits.to_poses(&model, &hash).is_err());

        let mut denormalized = base.clone();
        denormalized.poses[0].orientation = [2.0, 0.0, 0.0, 0.0];
        assert!(denormalized.to_poses(&model, &hash).is_err());

        let mut wrong_bin = base.clone();
        wrong_bin.poses[0].bin = Some((wrong_bin.poses[0].bin.unwrap() + 1) % 26);
        assert!(wrong_bin.to_poses(&model, &hash).is_err());

        let mut wrong_model = base.clone();
        wrong_model.model_hash = "somebody else".to_string();
        assert!(wrong_model.to_poses(&model, &hash).is_err());

        assert!(base.to_poses(&model, &hash).is_ok());
    }

    #[test]
    fn authored_sets_compute_bins_on_load() {
        let (file, model) = pendulum();
        let hash = file.hash();
        let lying = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 1.5707963267948966);
        let authored = vec![
            EndPose {
                root_orientation: UnitQuaternion::identity(),
                joints: vec![0.0],
                bin: 0,
                source: PoseSource::Authored,
            },
            EndPose {
                root_orientation: lying,
                joints: vec![0.7],
                bin: 0,
                source: PoseSource::Authored,
            },
        ];
        let on_disk = DatasetFile::authored(&authored, &hash);
        assert_eq!(on_disk.role, SplitRole::Authored);
        assert!(on_disk.poses.iter().all(|p| p.bin.is_none()));
        let loaded = on_disk.to_poses(&model, &hash).unwrap();
        assert_eq!(
            loaded[0].bin,
            orientation_bin(&UnitQuaternion::identity(), 26)
        );
        assert_eq!(loaded[1].bin, orientation_bin(&lying, 26));
        assert!(loaded.iter().all(|p| p.source == PoseSource::Authored));
        // The histogram in the header matches the recomputed bins.
        let histogram = on_disk.bin_histogram.clone();
        assert_eq!(histogram.iter().sum::<usize>(), 2);
        assert_eq!(histogram[loaded[0].bin] + histogram[loaded[1].bin], 2);
    }
}
