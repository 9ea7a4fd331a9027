//! Sampling-based generation of statically stable end-pose datasets.
//!
//! Candidates draw joint angles uniformly inside their limits and a root
//! orientation from pitch-then-yaw rotations over the full circle. Each
//! surviving candidate is dropped from a small height with actuators frozen
//! at high gain until it settles; the settled pose is kept only while its
//! orientation bin is not already overrepresented, which steers the dataset
//! toward even coverage of resting orientations.

use nalgebra::{UnitQuaternion, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{settle, SimError, SimParams, SimState};
use crate::model::{Pose, RobotModel};

/// Origin of a stored end pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseSource {
    Generated,
    Authored,
}

/// A settled, statically stable goal configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EndPose {
    pub root_orientation: UnitQuaternion<f64>,
    /// Joint angles, rad.
    pub joints: Vec<f64>,
    /// Orientation bin of the settled root orientation.
    pub bin: usize,
    pub source: PoseSource,
}

/// Knobs for candidate settling and dataset balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Number of orientation bins (nested prefixes of the 26 cube
    /// directions; values above 26 use all of them).
    pub n_bins: usize,
    /// Largest allowed ratio between non-empty bin counts.
    pub balance_ratio: f64,
    /// Drop height of the lowest collision sphere above ground, m.
    pub drop_height: f64,
    /// Gain scale while frozen during settling.
    pub frozen_gain: f64,
    /// Settling budget per candidate, s.
    pub settle_max_time: f64,
    /// Linear rest tolerance for settling, m/s.
    pub lin_tol: f64,
    /// Angular rest tolerance for settling, rad/s.
    pub ang_tol: f64,
    /// Time the rest tolerances must hold, s.
    pub hold_time: f64,
    /// Sampling budget as attempts per requested pose.
    pub attempts_per_pose: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n_bins: 26,
            balance_ratio: 2.0,
            drop_height: 0.04,
            frozen_gain: 10.0,
            settle_max_time: 10.0,
            lin_tol: 0.05,
            ang_tol: 0.5,
            hold_time: 0.3,
            attempts_per_pose: 200,
        }
    }
}

/// Generated end poses plus the bookkeeping needed to audit balance and to
/// regenerate the dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDataset {
    pub poses: Vec<EndPose>,
    /// Pose count per orientation bin.
    pub bin_histogram: Vec<usize>,
    pub seed: u64,
    pub params: GenParams,
    /// False when the sampling budget ran out before the target count.
    pub complete: bool,
}

/// Why a candidate did not become an end pose.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseRejection {
    /// The drop did not come to rest within the settling budget.
    NotSettled,
    /// The simulation failed while settling.
    Sim(SimError),
}

impl core::fmt::Display for PoseRejection {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PoseRejection::NotSettled => write!(f, "candidate did not settle in time"),
            PoseRejection::Sim(e) => write!(f, "simulation failed while settling: {e}"),
        }
    }
}

/// The 26 cube-symmetric directions: the 6 face normals first, then the 12
/// edge and 8 corner directions. Taking a prefix of this list yields the
/// coarser face-only and face+edge partitions.
const CUBE_DIRECTIONS: [(i8, i8, i8); 26] = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
    (1, 1, 0),
    (1, -1, 0),
    (-1, 1, 0),
    (-1, -1, 0),
    (1, 0, 1),
    (1, 0, -1),
    (-1, 0, 1),
    (-1, 0, -1),
    (0, 1, 1),
    (0, 1, -1),
    (0, -1, 1),
    (0, -1, -1),
    (1, 1, 1),
    (1, 1, -1),
    (1, -1, 1),
    (1, -1, -1),
    (-1, 1, 1),
    (-1, 1, -1),
    (-1, -1, 1),
    (-1, -1, -1),
];

/// Index of the bin containing the identity orientation (body up = world
/// up), exposed for readable assertions and reports.
pub const UPRIGHT_BIN: usize = 4;
/// Index of the bin for fully inverted orientations.
pub const INVERTED_BIN: usize = 5;

/// Bins an orientation by the nearest cube direction to the world up axis
/// expressed in the body frame. Pure yaw never moves a pose between bins.
/// `n_bins` selects a prefix of the direction list (clamped to 1..=26);
/// every unit quaternion maps to exactly one bin.
pub fn orientation_bin(orientation: &UnitQuaternion<f64>, n_bins: usize) -> usize {
    let n = n_bins.clamp(1, CUBE_DIRECTIONS.len());
    let up_body = orientation.inverse_transform_vector(&Vector3::z());
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, &(x, y, z)) in CUBE_DIRECTIONS[..n].iter().enumerate() {
        let dir = Vector3::new(x as f64, y as f64, z as f64).normalize();
        let dot = dir.dot(&up_body);
        if dot > best_dot {
            best_dot = dot;
            best = i;
        }
    }
    best
}

/// Draws one candidate pose: joints uniform over their closed limit
/// intervals, root orientation a pitch followed by a yaw, both over the
/// full circle. Self-colliding candidates are rejected (`None`); the rng
/// state still advances, so a fixed seed yields a fixed candidate stream.
pub fn sample_candidate<R: Rng>(model: &RobotModel, rng: &mut R) -> Option<Pose> {
    let joints: Vec<f64> = model
        .joints()
        .iter()
        .map(|j| rng.random_range(j.lower..=j.upper))
        .collect();
    let pitch = rng.random_range(-core::f64::consts::PI..=core::f64::consts::PI);
    let yaw = rng.random_range(-core::f64::consts::PI..=core::f64::consts::PI);
    let orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch);
    let pose = Pose::new(
        model.default_pose().root_position,
        orientation,
        joints,
    );
    match model.self_collision(&pose) {
        Ok(true) => None,
        Ok(false) => Some(pose),
        Err(_) => None,
    }
}

/// Drops a candidate from `drop_height` with actuators frozen (high gains
/// holding the candidate's joints) and returns the settled configuration.
pub fn settle_pose(
    model: &RobotModel,
    sim: &SimParams,
    candidate: &Pose,
    params: &GenParams,
) -> Result<EndPose, PoseRejection> {
    let mut pose = candidate.clone();
    let centers = model
        .sphere_centers(&pose)
        .map_err(|e| PoseRejection::Sim(SimError::Model(e)))?;
    let lowest = centers
        .iter()
        .zip(model.spheres())
        .map(|(c, s)| c.z - s.radius)
        .fold(f64::INFINITY, f64::min);
    pose.root_position.z -= lowest - params.drop_height;
    let state = SimState::from_pose(pose);
    let (settled_state, settled) = settle(
        model,
        sim,
        &state,
        params.frozen_gain,
        &candidate.joints,
        params.settle_max_time,
        params.lin_tol,
        params.ang_tol,
        params.hold_time,
    )
    .map_err(PoseRejection::Sim)?;
    if !settled {
        return Err(PoseRejection::NotSettled);
    }
    let orientation = settled_state.pose.root_orientation;
    Ok(EndPose {
        root_orientation: orientation,
        joints: settled_state.pose.joints,
        bin: orientation_bin(&orientation, params.n_bins),
        source: PoseSource::Generated,
    })
}

/// Drops surplus poses so the emitted histogram satisfies the balance
/// invariant exactly: over candidate floors `m`, keeps bins holding at
/// least `m` poses capped at `ratio * m`, choosing the floor that retains
/// the most poses (ties prefer the smaller floor, i.e. more bins). Within
/// a bin the earliest poses survive, so the pass is deterministic.
fn rebalance(poses: &mut Vec<EndPose>, histogram: &mut [usize], ratio: f64) {
    let mut floors: Vec<usize> = histogram.iter().copied().filter(|&c| c > 0).collect();
    floors.sort_unstable();
    floors.dedup();
    if floors.len() <= 1 {
        return;
    }
    let total_kept = |m: usize| -> usize {
        let cap = (ratio * m as f64).floor() as usize;
        histogram
            .iter()
            .filter(|&&c| c >= m)
            .map(|&c| c.min(cap))
            .sum()
    };
    let best = *floors
        .iter()
        .max_by_key(|&&m| (total_kept(m), core::cmp::Reverse(m)))
        .expect("floors is non-empty");
    let cap = (ratio * best as f64).floor() as usize;
    let mut kept_so_far = vec![0usize; histogram.len()];
    poses.retain(|pose| {
        let keep = histogram[pose.bin] >= best && kept_so_far[pose.bin] < cap;
        if keep {
            kept_so_far[pose.bin] += 1;
        }
        keep
    });
    histogram.copy_from_slice(&kept_so_far);
}

/// Runs sample → settle → bin until `n_target` poses are collected or the
/// attempt budget runs out. While sampling, a settled pose is discarded
/// when its bin already holds `balance_ratio` times the smallest non-empty
/// bin count (plus one pose of slack, so physically rare orientations
/// cannot deadlock generation); because that running rule cannot bound the
/// final histogram by itself, a rebalancing pass trims the result and
/// sampling resumes until the target count holds together with the balance
/// invariant, or the budget runs out.
pub fn generate_dataset(
    model: &RobotModel,
    sim: &SimParams,
    n_target: usize,
    params: &GenParams,
    seed: u64,
) -> PoseDataset {
    let n_bins = params.n_bins.clamp(1, CUBE_DIRECTIONS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses: Vec<EndPose> = Vec::with_capacity(n_target);
    let mut histogram = vec![0usize; n_bins];
    let budget = params.attempts_per_pose.saturating_mul(n_target);
    let mut attempts = 0;
    loop {
        while poses.len() < n_target && attempts < budget {
            attempts += 1;
            let Some(candidate) = sample_candidate(model, &mut rng) else {
                continue;
            };
            let Ok(end_pose) = settle_pose(model, sim, &candidate, params) else {
                continue;
            };
            let count = histogram[end_pose.bin];
            let min_occupied = histogram
                .iter()
                .copied()
                .filter(|&c| c > 0)
                .min()
                .unwrap_or(0);
            if (count + 1) as f64 > params.balance_ratio * (min_occupied + 1) as f64 {
                continue;
            }
            histogram[end_pose.bin] += 1;
            poses.push(end_pose);
        }
        rebalance(&mut poses, &mut histogram, params.balance_ratio);
        if poses.len() >= n_target || attempts >= budget {
            break;
        }
    }
    let complete = poses.len() >= n_target;
    PoseDataset {
        poses,
        bin_histogram: histogram,
        seed,
        params: params.clone(),
        complete,
    }
}
