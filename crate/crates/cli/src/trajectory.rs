//! Single-rollout trajectory export.
//!
//! Two sibling formats from the same data: JSON Lines (a header record
//! followed by one record per control step, exact and reloadable) and CSV
//! (flat numeric columns, one per channel, for spreadsheets and plotting
//! scripts). The JSONL file is the artifact of record; the CSV is a
//! convenience projection of it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{read_to_string, write_file, ToolError};

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;
pub const TRAJECTORY_KIND: &str = "softfall-trajectory";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub version: u32,
    pub kind: String,
    pub model_hash: String,
    pub config_hash: String,
    pub seed: u64,
    /// Policy label (baseline name or checkpoint stem).
    pub policy: String,
    /// Index of the goal pose in the dataset the rollout tracked.
    pub pose_index: usize,
    pub control_dt: f64,
    pub body_names: Vec<String>,
    pub component_names: Vec<String>,
    /// One name per joint: the body the joint drives.
    pub joint_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Time at the end of the step, s.
    pub t: f64,
    pub root_position: [f64; 3],
    /// Root orientation as `[w, x, y, z]`.
    pub root_orientation: [f64; 4],
    pub joints: Vec<f64>,
    pub joint_velocities: Vec<f64>,
    /// Commanded joint setpoints for this step, rad.
    pub targets: Vec<f64>,
    /// Applied joint torques, substep mean, N·m.
    pub torques: Vec<f64>,
    /// Peak contact force magnitude per body over the step, N.
    pub body_forces: Vec<f64>,
    /// Peak contact force magnitude per component over the step, N.
    pub component_forces: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), ToolError> {
        if self.header.version != TRAJECTORY_FORMAT_VERSION {
            return Err(ToolError::Data(format!(
                "trajectory format version {} (this build reads {TRAJECTORY_FORMAT_VERSION})",
                self.header.version
            )));
        }
        if self.header.kind != TRAJECTORY_KIND {
            return Err(ToolError::Data(format!(
                "not a trajectory (kind {:?})",
                self.header.kind
            )));
        }
        let joints = self.header.joint_names.len();
        for (i, step) in self.steps.iter().enumerate() {
            let ok = step.joints.len() == joints
                && step.joint_velocities.len() == joints
                && step.targets.len() == joints
                && step.torques.len() == joints
                && step.body_forces.len() == self.header.body_names.len()
                && step.component_forces.len() == self.header.component_names.len();
            if !ok {
                return Err(ToolError::Data(format!(
                    "step {i} channel lengths do not match the header"
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("headers serialize");
        out.push('\n');
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("steps serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ToolError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| ToolError::Data("trajectory file is empty".to_string()))?;
        let header: TrajectoryHeader = serde_json::from_str(header_line)
            .map_err(|e| ToolError::Data(format!("trajectory header: {e}")))?;
        let steps = lines
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line)
                    .map_err(|e| ToolError::Data(format!("trajectory step {i}: {e}")))
            })
            .collect::<Result<Vec<TrajectoryStep>, _>>()?;
        let trajectory = Trajectory { header, steps };
        trajectory.validate()?;
        Ok(trajectory)
    }

    /// Flat numeric table: one row per step, one column per channel.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut columns: Vec<String> = vec![
            "t".into(),
            "root_x".into(),
            "root_y".into(),
            "root_z".into(),
            "root_qw".into(),
            "root_qx".into(),
            "root_qy".into(),
            "root_qz".into(),
        ];
        for name in &h.joint_names {
            columns.push(format!("joint_{}", sanitize(name)));
        }
        for name in &h.joint_names {
            columns.push(format!("joint_vel_{}", sanitize(name)));
        }
        for name in &h.joint_names {
            columns.push(format!("target_{}", sanitize(name)));
        }
        for name in &h.joint_names {
            columns.push(format!("torque_{}", sanitize(name)));
        }
        for name in &h.body_names {
            columns.push(format!("force_body_{}", sanitize(name)));
        }
        for name in &h.component_names {
            columns.push(format!("force_comp_{}", sanitize(name)));
        }
        let mut out = columns.join(",");
        out.push('\n');
        for step in &self.steps {
            let mut row: Vec<String> = Vec::with_capacity(columns.len());
            row.push(fmt(step.t));
            row.extend(step.root_position.iter().copied().map(fmt));
            row.extend(step.root_orientation.iter().copied().map(fmt));
            for channel in [
                &step.joints,
                &step.joint_velocities,
                &step.targets,
                &step.torques,
                &step.body_forces,
                &step.component_forces,
            ] {
                row.extend(channel.iter().copied().map(fmt));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// CSV column names must not introduce separators or quoting.
fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, ToolError> {
    Trajectory::from_jsonl(&read_to_string(path)?)
}

/// Writes `<base>.jsonl` and `<base>.csv`.
pub fn save_trajectory(base: &Path, trajectory: &Trajectory) -> Result<(), ToolError> {
    trajectory.validate()?;
    write_file(&base.with_extension("jsonl"), &trajectory.to_jsonl())?;
    write_file(&base.with_extension("csv"), &trajectory.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let header = TrajectoryHeader {
            version: TRAJECTORY_FORMAT_VERSION,
            kind: TRAJECTORY_KIND.to_string(),
            model_hash: "m".into(),
            config_hash: "c".into(),
            seed: 3,
            policy: "mean".into(),
            pose_index: 1,
            control_dt: 0.02,
            body_names: vec!["base".into(), "bob".into()],
            component_names: vec!["all".into()],
            joint_names: vec!["bob".into()],
        };
        let step = |k: usize| TrajectoryStep {
            t: 0.02 * (k + 1) as f64,
            root_position: [0.0, 0.0, 0.5 - 0.01 * k as f64],
            root_orientation: [1.0, 0.0, 0.0, 0.0],
            joints: vec![0.1 * k as f64],
            joint_velocities: vec![0.5],
            targets: vec![0.25],
            torques: vec![-0.125],
            body_forces: vec![0.0, 9.5 + k as f64],
            component_forces: vec![9.5 + k as f64],
        };
        Trajectory {
            header,
            steps: (0..3).map(step).collect(),
        }
    }

    #[test]
    fn jsonl_round_trips_exactly() {
        let trajectory = sample();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("traj");
        save_trajectory(&base, &trajectory).unwrap();
        let loaded = load_trajectory(&base.with_extension("jsonl")).unwrap();
        assert_eq!(loaded, trajectory);
        assert!(base.with_extension("csv").exists());
    }

    #[test]
    fn csv_is_rectangular_and_named_per_channel() {
        let trajectory = sample();
        let csv = trajectory.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + trajectory.steps.len());
        let header_cols = lines[0].split(',').count();
        // t + position + quaternion + 4 joint channels + 2 bodies + 1 component.
        assert_eq!(header_cols, 1 + 3 + 4 + 4 + 2 + 1);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), header_cols);
        }
        assert!(lines[0].contains("force_body_bob"));
        assert!(lines[0].contains("force_comp_all"));
        assert!(lines[1].starts_with("0.02,"));
    }

    #[test]
    fn malformed_files_are_data_errors() {
        assert!(matches!(
            Trajectory::from_jsonl(""),
            Err(ToolError::Data(_))
        ));
        assert!(matches!(
            Trajectory::from_jsonl("{\"bad\": 1}\n"),
            Err(ToolError::Data(_))
        ));

        let mut wrong_kind = sample();
        wrong_kind.header.kind = "poses".into();
        assert!(wrong_kind.validate().is_err());

        let mut ragged = sample();
        ragged.steps[1].body_forces.pop();
        assert!(ragged.validate().is_err());
        assert!(Trajectory::from_jsonl(&ragged.to_jsonl()).is_err());
    }
}
