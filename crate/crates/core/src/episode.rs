//! The training and evaluation environment: initial-state randomization,
//! disturbance scheduling, goal transformation into the path frame,
//! observation assembly, reward evaluation, and termination.
//!
//! Episodes run at the 50 Hz control rate for a fixed horizon with no early
//! termination: falling is the task, so the policy is always scored through
//! touchdown and settling. The actor observes proprioception and the goal in
//! path-relative coordinates; the critic additionally receives privileged
//! simulator-state channels that are unavailable on hardware. Training mode
//! adds sensor noise to the actor view, clips contact forces inside the
//! reward, and applies random disturbance wrenches; evaluation disables all
//! three.

use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{
    self, BodyMotion, ContactParams, ContactReport, SimError, SimParams, SimState, Wrench,
    DEFAULT_CONTROL_DT,
};
use crate::frames;
use crate::model::{ModelError, Pose, RobotModel};
use crate::posegen::EndPose;
use crate::reward::{
    self, ActionHistory, RewardBreakdown, RewardTerms, RewardWeights, WeightError,
};

/// Half-widths of the symmetric intervals the initial state is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialStateRanges {
    /// Root roll, rad.
    pub roll: f64,
    /// Root pitch, rad.
    pub pitch: f64,
    /// Fraction of the distance from each default setpoint to its joint
    /// limits covered by the joint-position draw: 0 pins the reference
    /// configuration, 1 draws uniformly over the full limit interval.
    pub joint_span: f64,
    /// Root linear velocity per world axis, m/s.
    pub lin_vel: f64,
    /// Root angular velocity per body axis, rad/s.
    pub ang_vel: f64,
    /// Velocity per joint, rad/s.
    pub joint_vel: f64,
}

impl Default for InitialStateRanges {
    fn default() -> Self {
        Self {
            roll: 30.0 * core::f64::consts::PI / 180.0,
            pitch: 30.0 * core::f64::consts::PI / 180.0,
            joint_span: 1.0,
            lin_vel: 2.0,
            ang_vel: 0.5,
            joint_vel: 0.5,
        }
    }
}

impl InitialStateRanges {
    /// All ranges collapsed to a point: the upright reference state at rest.
    pub fn zero() -> Self {
        Self {
            roll: 0.0,
            pitch: 0.0,
            joint_span: 0.0,
            lin_vel: 0.0,
            ang_vel: 0.0,
            joint_vel: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let non_negative = [
            self.roll,
            self.pitch,
            self.joint_span,
            self.lin_vel,
            self.ang_vel,
            self.joint_vel,
        ];
        if non_negative.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(EpisodeError::Config {
                reason: "initial-state ranges must be finite and non-negative",
            });
        }
        if self.joint_span > 1.0 {
            return Err(EpisodeError::Config {
                reason: "joint_span must not exceed 1",
            });
        }
        Ok(())
    }
}

/// Standard deviations of the zero-mean Gaussian noise added to the actor
/// observation in training mode. The action-history and goal channels stay
/// exact: they are commands the controller itself issued, not measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Root-orientation quaternion components.
    pub orientation: f64,
    /// Root linear and angular velocity, m/s and rad/s.
    pub root_vel: f64,
    /// Joint positions, rad.
    pub joints: f64,
    /// Joint velocities, rad/s.
    pub joint_vel: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            orientation: 0.01,
            root_vel: 0.05,
            joints: 0.01,
            joint_vel: 0.1,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let stds = [self.orientation, self.root_vel, self.joints, self.joint_vel];
        if stds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(EpisodeError::Config {
                reason: "noise standard deviations must be finite and non-negative",
            });
        }
        Ok(())
    }
}

/// Bodies sharing one disturbance scheduling law. Each listed body gets its
/// own independent schedule of alternating on/off windows; during an
/// on-window a constant wrench drawn at the window start acts on the body.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceGroup {
    /// Body indices receiving independent schedules.
    pub bodies: Vec<usize>,
    /// Per-axis force magnitude bound, N.
    pub force: f64,
    /// Per-axis torque magnitude bound, N·m.
    pub torque: f64,
    /// On-window duration interval, s.
    pub on: (f64, f64),
    /// Off-window duration interval, s.
    pub off: (f64, f64),
}

impl DisturbanceGroup {
    /// Short-burst schedule used for extremity bodies (hips, feet, elbows).
    pub fn burst(bodies: Vec<usize>) -> Self {
        Self {
            bodies,
            force: 5.0,
            torque: 0.25,
            on: (0.25, 2.0),
            off: (1.0, 3.0),
        }
    }

    /// Sustained-push schedule used for central bodies (pelvis, head).
    pub fn sustained(bodies: Vec<usize>) -> Self {
        Self {
            bodies,
            force: 5.0,
            torque: 0.25,
            on: (2.0, 10.0),
            off: (1.0, 3.0),
        }
    }
}

/// Disturbance settings for a whole robot; an empty group list disables
/// disturbances entirely.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisturbanceConfig {
    pub groups: Vec<DisturbanceGroup>,
}

impl DisturbanceConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, model: &RobotModel) -> Result<(), EpisodeError> {
        for group in &self.groups {
            if group.bodies.iter().any(|&b| b >= model.n_bodies()) {
                return Err(EpisodeError::Config {
                    reason: "disturbance body index out of range",
                });
            }
            if !group.force.is_finite()
                || group.force < 0.0
                || !group.torque.is_finite()
                || group.torque < 0.0
            {
                return Err(EpisodeError::Config {
                    reason: "disturbance magnitudes must be finite and non-negative",
                });
            }
            let ordered =
                |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
            if !ordered(group.on) || !ordered(group.off) {
                return Err(EpisodeError::Config {
                    reason: "disturbance durations must be ordered non-negative intervals",
                });
            }
            if group.on.0 + group.off.0 == 0.0 {
                return Err(EpisodeError::Config {
                    reason: "disturbance on/off cycle must have positive minimum length",
                });
            }
        }
        Ok(())
    }
}

/// One sampled on-window: a constant wrench on `body` over `[start, end)`
/// seconds of episode time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceWindow {
    pub body: usize,
    pub start: f64,
    pub end: f64,
    /// N, world frame, applied at the body's center of mass.
    pub force: Vector3<f64>,
    /// N·m, world frame.
    pub torque: Vector3<f64>,
}

/// All disturbance windows of one episode, sampled at reset so a seed fixes
/// the whole schedule up front.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisturbanceSchedule {
    windows: Vec<DisturbanceWindow>,
}

impl DisturbanceSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Samples alternating on/off windows per body until `horizon` is
    /// covered. The first on-window starts at t = 0; wrench components are
    /// drawn per axis with a symmetric sign, so the configured magnitudes
    /// bound `|component|` without biasing any direction. The final window
    /// keeps its drawn duration even where it overruns the horizon.
    pub fn sample<R: Rng>(config: &DisturbanceConfig, horizon: f64, rng: &mut R) -> Self {
        let mut windows = Vec::new();
        for group in &config.groups {
            for &body in &group.bodies {
                let mut t = 0.0;
                while t < horizon {
                    let on = rng.random_range(group.on.0..=group.on.1);
                    let draw3 = |rng: &mut R, bound: f64| {
                        Vector3::new(
                            rng.random_range(-bound..=bound),
                            rng.random_range(-bound..=bound),
                            rng.random_range(-bound..=bound),
                        )
                    };
                    let force = draw3(rng, group.force);
                    let torque = draw3(rng, group.torque);
                    windows.push(DisturbanceWindow {
                        body,
                        start: t,
                        end: t + on,
                        force,
                        torque,
                    });
                    t += on + rng.random_range(group.off.0..=group.off.1);
                }
            }
        }
        Self { windows }
    }

    pub fn windows(&self) -> &[DisturbanceWindow] {
        &self.windows
    }

    /// Wrenches whose on-window contains `t`.
    pub fn active(&self, t: f64) -> Vec<Wrench> {
        self.windows
            .iter()
            .filter(|w| w.start <= t && t < w.end)
            .map(|w| Wrench {
                body: w.body,
                force: w.force,
                torque: w.torque,
            })
            .collect()
    }
}

/// Actor and privileged critic views of one control step.
///
/// Actor layout (`n` joints): path-frame root orientation quaternion
/// `(w, x, y, z)` with canonical sign (4), root-frame linear velocity (3),
/// root-frame angular velocity (3), joint positions (n), joint velocities
/// (n), previous action (n), action before that (n), path-frame goal
/// orientation (4), goal joints (n) — `14 + 5n` entries.
///
/// Critic layout: the noiseless actor vector, then contact stiffness,
/// damping, and friction coefficient (3), then per body its path-frame
/// angular velocity, center-of-mass velocity, and their finite-difference
/// accelerations (12 each), then the episode phase `t/T` (1).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub actor: Vec<f64>,
    pub critic: Vec<f64>,
}

/// Actor observation length for an `n_joints` model.
pub fn actor_dim(n_joints: usize) -> usize {
    14 + 5 * n_joints
}

/// Critic observation length for an `n_joints`, `n_bodies` model.
pub fn critic_dim(n_joints: usize, n_bodies: usize) -> usize {
    actor_dim(n_joints) + 3 + 12 * n_bodies + 1
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeError {
    Sim(SimError),
    Weights(WeightError),
    /// Initial-state rejection sampling ran out of attempts.
    SampleBudget { attempts: usize },
    /// A configuration value is invalid.
    Config { reason: &'static str },
    /// The goal dataset is unusable.
    BadDataset { reason: &'static str },
    /// The action vector length does not match the joint count.
    ActionLength { expected: usize, got: usize },
    /// `step` was called on a finished episode.
    EpisodeOver,
}

impl fmt::Display for EpisodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpisodeError::Sim(e) => write!(f, "{e}"),
            EpisodeError::Weights(e) => write!(f, "{e}"),
            EpisodeError::SampleBudget { attempts } => {
                write!(f, "no valid initial state found in {attempts} attempts")
            }
            EpisodeError::Config { reason } => {
                write!(f, "invalid episode configuration: {reason}")
            }
            EpisodeError::BadDataset { reason } => write!(f, "invalid goal dataset: {reason}"),
            EpisodeError::ActionLength { expected, got } => {
                write!(f, "action has {got} entries but the model has {expected} joints")
            }
            EpisodeError::EpisodeOver => write!(f, "episode is finished; call reset first"),
        }
    }
}

impl From<SimError> for EpisodeError {
    fn from(e: SimError) -> Self {
        EpisodeError::Sim(e)
    }
}

impl From<ModelError> for EpisodeError {
    fn from(e: ModelError) -> Self {
        EpisodeError::Sim(SimError::Model(e))
    }
}

impl From<WeightError> for EpisodeError {
    fn from(e: WeightError) -> Self {
        EpisodeError::Weights(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EpisodeError {}

/// Everything an episode needs beyond the model, the physics parameters,
/// and the goal dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub ranges: InitialStateRanges,
    pub noise: NoiseParams,
    pub disturbances: DisturbanceConfig,
    pub weights: RewardWeights,
    /// Episode length, s.
    pub horizon: f64,
    /// Control period, s.
    pub control_dt: f64,
    /// PD gain scale passed to the simulator.
    pub gain_scale: f64,
    /// Training mode enables observation noise, contact-force clipping in
    /// the reward, and disturbances; evaluation mode disables all three.
    pub training: bool,
    /// Initial clearance of the lowest collision sphere above ground, m.
    pub height_margin: f64,
    /// Initial-state rejection budget, attempts.
    pub sample_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            ranges: InitialStateRanges::default(),
            noise: NoiseParams::default(),
            disturbances: DisturbanceConfig::default(),
            weights: RewardWeights::default(),
            horizon: 4.0,
            control_dt: DEFAULT_CONTROL_DT,
            gain_scale: 1.0,
            training: true,
            height_margin: 0.02,
            sample_attempts: 1000,
        }
    }
}

impl EpisodeConfig {
    /// Number of control steps in one episode.
    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.control_dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        self.weights.validate()?;
        self.ranges.validate()?;
        self.noise.validate()?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(EpisodeError::Config {
                reason: "horizon must be positive and finite",
            });
        }
        if !(self.control_dt > 0.0) || !self.control_dt.is_finite() {
            return Err(EpisodeError::Config {
                reason: "control period must be positive and finite",
            });
        }
        if self.horizon_steps() == 0 {
            return Err(EpisodeError::Config {
                reason: "horizon is shorter than one control step",
            });
        }
        if !self.gain_scale.is_finite() || self.gain_scale < 0.0 {
            return Err(EpisodeError::Config {
                reason: "gain scale must be finite and non-negative",
            });
        }
        if !self.height_margin.is_finite() || self.height_margin < 0.0 {
            return Err(EpisodeError::Config {
                reason: "height margin must be finite and non-negative",
            });
        }
        if self.sample_attempts == 0 {
            return Err(EpisodeError::Config {
                reason: "sample budget must allow at least one attempt",
            });
        }
        Ok(())
    }
}

/// Draws an initial state: joint positions uniform inside the (possibly
/// narrowed) limit intervals, root orientation as a pitch draw followed by a
/// roll draw, and all velocities uniform inside their ranges. Self-colliding
/// configurations are rejected and redrawn. The root is placed so the lowest
/// collision sphere clears the ground by `height_margin`, which rules out
/// initial penetration by construction.
///
/// Every attempt consumes the same number of rng draws, so the stream stays
/// aligned across accept/reject outcomes and a fixed seed reproduces the
/// result exactly.
pub fn sample_initial_state<R: Rng>(
    model: &RobotModel,
    ranges: &InitialStateRanges,
    height_margin: f64,
    attempts: usize,
    rng: &mut R,
) -> Result<SimState, EpisodeError> {
    for _ in 0..attempts {
        let joints: Vec<f64> = model
            .joints()
            .iter()
            .map(|j| {
                let s = j.setpoint_default.clamp(j.lower, j.upper);
                let lo = s - ranges.joint_span * (s - j.lower);
                let hi = s + ranges.joint_span * (j.upper - s);
                rng.random_range(lo..=hi)
            })
            .collect();
        let pitch = rng.random_range(-ranges.pitch..=ranges.pitch);
        let roll = rng.random_range(-ranges.roll..=ranges.roll);
        let orientation = frames::quat_from_yaw_pitch_roll(0.0, pitch, roll);
        let lin_vel = Vector3::new(
            rng.random_range(-ranges.lin_vel..=ranges.lin_vel),
            rng.random_range(-ranges.lin_vel..=ranges.lin_vel),
            rng.random_range(-ranges.lin_vel..=ranges.lin_vel),
        );
        let ang_vel = Vector3::new(
            rng.random_range(-ranges.ang_vel..=ranges.ang_vel),
            rng.random_range(-ranges.ang_vel..=ranges.ang_vel),
            rng.random_range(-ranges.ang_vel..=ranges.ang_vel),
        );
        let joint_vel: Vec<f64> = (0..model.n_joints())
            .map(|_| rng.random_range(-ranges.joint_vel..=ranges.joint_vel))
            .collect();

        let mut pose = Pose::new(Vector3::zeros(), orientation, joints);
        if model.self_collision(&pose)? {
            continue;
        }
        let centers = model.sphere_centers(&pose)?;
        let lowest = centers
            .iter()
            .zip(model.spheres())
            .map(|(c, s)| c.z - s.radius)
            .fold(f64::INFINITY, f64::min);
        pose.root_position.z = height_margin - lowest;

        let mut state = SimState::from_pose(pose);
        state.root_lin_vel = lin_vel;
        state.root_ang_vel = ang_vel;
        state.joint_vel = joint_vel;
        return Ok(state);
    }
    Err(EpisodeError::SampleBudget { attempts })
}

/// Expresses the end-pose goal in the current path frame. The joint targets
/// are frame-independent; the orientation target is re-expressed on every
/// call, so the goal follows the robot's heading instead of pinning a world
/// heading it had at reset.
pub fn transform_goal(
    end_pose: &EndPose,
    state: &SimState,
) -> (UnitQuaternion<f64>, Vec<f64>) {
    let frame = frames::path_frame(&state.pose.root_position, &state.pose.root_orientation);
    (
        frame.transform_orientation(&end_pose.root_orientation),
        end_pose.joints.clone(),
    )
}

/// Quaternion coefficients `(w, x, y, z)` with a canonical sign: the first
/// coefficient of magnitude above 0.1 is made positive. A unit quaternion
/// always has one (the largest is at least 1/2), and unlike `w >= 0` the
/// rule is stable near its boundary, so equal rotations produce equal
/// coefficient vectors even when the heading wraps across ±π.
fn canonical_coords(q: &UnitQuaternion<f64>) -> [f64; 4] {
    let c = [q.w, q.i, q.j, q.k];
    let lead = c.iter().copied().find(|x| x.abs() > 0.1).unwrap_or(q.w);
    if lead < 0.0 {
        [-c[0], -c[1], -c[2], -c[3]]
    } else {
        c
    }
}

/// Assembles the noiseless observation of `state` toward `end_pose`.
///
/// `prev_motions` holds the per-body motions one control step earlier, used
/// to finite-difference the privileged body accelerations; pass the current
/// motions at episode start so the initial accelerations read zero. `phase`
/// is the episode progress `t/T`.
pub fn observe(
    model: &RobotModel,
    contact: &ContactParams,
    state: &SimState,
    end_pose: &EndPose,
    history: &ActionHistory,
    prev_motions: &[BodyMotion],
    control_dt: f64,
    phase: f64,
) -> Result<Observation, EpisodeError> {
    let n = model.n_joints();
    for len in [end_pose.joints.len(), history.prev().len(), history.prev2().len()] {
        if len != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                got: len,
            }
            .into());
        }
    }
    if prev_motions.len() != model.n_bodies() {
        return Err(ModelError::DimensionMismatch {
            expected: model.n_bodies(),
            got: prev_motions.len(),
        }
        .into());
    }

    let frame = frames::path_frame(&state.pose.root_position, &state.pose.root_orientation);
    let mut actor = Vec::with_capacity(actor_dim(n));
    actor.extend_from_slice(&canonical_coords(
        &frame.transform_orientation(&state.pose.root_orientation),
    ));
    let v_root = state
        .pose
        .root_orientation
        .inverse_transform_vector(&state.root_lin_vel);
    actor.extend_from_slice(v_root.as_slice());
    actor.extend_from_slice(state.root_ang_vel.as_slice());
    actor.extend_from_slice(&state.pose.joints);
    actor.extend_from_slice(&state.joint_vel);
    actor.extend_from_slice(history.prev());
    actor.extend_from_slice(history.prev2());
    let (goal_orientation, goal_joints) = transform_goal(end_pose, state);
    actor.extend_from_slice(&canonical_coords(&goal_orientation));
    actor.extend_from_slice(&goal_joints);
    debug_assert_eq!(actor.len(), actor_dim(n));

    let motions = dynamics::body_motions(model, state)?;
    let mut critic = Vec::with_capacity(critic_dim(n, model.n_bodies()));
    critic.extend_from_slice(&actor);
    critic.extend_from_slice(&[contact.stiffness, contact.damping, contact.friction]);
    for (m, p) in motions.iter().zip(prev_motions) {
        let ang_acc = (m.ang_vel - p.ang_vel) / control_dt;
        let com_acc = (m.com_vel - p.com_vel) / control_dt;
        critic.extend_from_slice(frame.transform_vector(&m.ang_vel).as_slice());
        critic.extend_from_slice(frame.transform_vector(&m.com_vel).as_slice());
        critic.extend_from_slice(frame.transform_vector(&ang_acc).as_slice());
        critic.extend_from_slice(frame.transform_vector(&com_acc).as_slice());
    }
    critic.push(phase);
    debug_assert_eq!(critic.len(), critic_dim(n, model.n_bodies()));
    Ok(Observation { actor, critic })
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    /// Weighted reward; all-zero when the step failed.
    pub reward: RewardBreakdown,
    /// Unweighted term values behind `reward`, kept so weight sweeps can
    /// re-score recorded episodes without re-simulating.
    pub terms: RewardTerms,
    /// Contact and torque summary from the simulator.
    pub report: ContactReport,
    /// The episode is finished (horizon reached or integration failed).
    pub done: bool,
    /// Integration failed this step; the episode should be discarded from
    /// training batches rather than penalized.
    pub failed: bool,
}

/// One environment instance: owns its simulator state, rng, goal, and
/// disturbance schedule. Instances share nothing mutable, so a worker pool
/// can step many of them in parallel and gather the outcomes per step.
#[derive(Debug, Clone)]
pub struct Environment {
    model: RobotModel,
    sim: SimParams,
    config: EpisodeConfig,
    goals: Vec<EndPose>,
    rng: ChaCha8Rng,
    state: SimState,
    goal_index: usize,
    schedule: DisturbanceSchedule,
    history: ActionHistory,
    prev_motions: Vec<BodyMotion>,
    steps: usize,
    done: bool,
    failed: bool,
}

impl Environment {
    /// Validates the configuration and goal dataset. The environment starts
    /// finished; call [`Environment::reset`] to begin an episode.
    pub fn new(
        model: RobotModel,
        sim: SimParams,
        config: EpisodeConfig,
        goals: Vec<EndPose>,
        seed: u64,
    ) -> Result<Self, EpisodeError> {
        config.validate()?;
        config.disturbances.validate(&model)?;
        if goals.is_empty() {
            return Err(EpisodeError::BadDataset {
                reason: "goal dataset is empty",
            });
        }
        if goals.iter().any(|g| g.joints.len() != model.n_joints()) {
            return Err(EpisodeError::BadDataset {
                reason: "goal joint count differs from the model",
            });
        }
        let state = SimState::from_pose(model.default_pose());
        let history = ActionHistory::new(&state.pose.joints);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            state,
            goal_index: 0,
            schedule: DisturbanceSchedule::empty(),
            history,
            prev_motions: Vec::new(),
            steps: 0,
            done: true,
            failed: false,
            model,
            sim,
            config,
            goals,
        })
    }

    /// Starts a new episode: draws the initial state, a goal pose uniformly
    /// from the dataset, and (in training mode) a disturbance schedule, then
    /// returns the first observation.
    pub fn reset(&mut self) -> Result<Observation, EpisodeError> {
        let state = sample_initial_state(
            &self.model,
            &self.config.ranges,
            self.config.height_margin,
            self.config.sample_attempts,
            &mut self.rng,
        )?;
        self.begin(state)
    }

    /// Replaces the rng with a fresh stream and abandons any episode in
    /// progress (the next [`Environment::reset`] starts over). Training
    /// drivers use this to put a batch of environments into a state that
    /// depends only on the seed, which is what makes resumed runs replay
    /// uninterrupted ones exactly.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.done = true;
    }

    /// Starts a new episode from a caller-supplied state instead of a
    /// random draw; the goal and disturbance schedule are still drawn from
    /// the environment's rng. Used to replay specific initial conditions.
    pub fn reset_from(&mut self, state: SimState) -> Result<Observation, EpisodeError> {
        if state.pose.joints.len() != self.model.n_joints()
            || state.joint_vel.len() != self.model.n_joints()
        {
            return Err(ModelError::DimensionMismatch {
                expected: self.model.n_joints(),
                got: state.pose.joints.len(),
            }
            .into());
        }
        if !state.is_finite() {
            return Err(SimError::NonFinite { time: state.time }.into());
        }
        self.begin(state)
    }

    fn begin(&mut self, state: SimState) -> Result<Observation, EpisodeError> {
        self.goal_index = self.rng.random_range(0..self.goals.len());
        self.schedule = if self.config.training {
            DisturbanceSchedule::sample(&self.config.disturbances, self.config.horizon, &mut self.rng)
        } else {
            DisturbanceSchedule::empty()
        };
        self.history = ActionHistory::new(&state.pose.joints);
        self.prev_motions = dynamics::body_motions(&self.model, &state)?;
        self.state = state;
        self.steps = 0;
        self.done = false;
        self.failed = false;
        self.observation()
    }

    /// Advances one control step. `action` is interpreted as PD setpoints
    /// and clamped to the joint limits before use. The episode finishes when
    /// the horizon is reached or integration fails; it never ends early just
    /// because the robot falls.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EpisodeError> {
        if self.done {
            return Err(EpisodeError::EpisodeOver);
        }
        let n = self.model.n_joints();
        if action.len() != n {
            return Err(EpisodeError::ActionLength {
                expected: n,
                got: action.len(),
            });
        }
        let setpoints: Vec<f64> = action
            .iter()
            .zip(self.model.joints())
            .map(|(a, j)| a.clamp(j.lower, j.upper))
            .collect();
        let t = self.steps as f64 * self.config.control_dt;
        let wrenches = self.schedule.active(t);

        match dynamics::step(
            &self.model,
            &self.sim,
            &self.state,
            &setpoints,
            self.config.gain_scale,
            &wrenches,
            self.config.control_dt,
        ) {
            Ok((next, report)) => {
                let t_next = (self.steps + 1) as f64 * self.config.control_dt;
                let (goal_orientation, goal_joints) =
                    transform_goal(&self.goals[self.goal_index], &next);
                let (contact, root_acc) = reward::impact_reward(
                    &self.model,
                    &report,
                    &next,
                    &self.config.weights,
                    self.config.training,
                );
                let (root_orientation, joint_positions) = reward::tracking_reward(
                    &next,
                    &goal_orientation,
                    &goal_joints,
                    t_next,
                    &self.config.weights,
                );
                let (torques, joint_acc, action_rate, action_acc) =
                    reward::regularization_reward(&report, &next, &setpoints, &self.history);
                let terms = RewardTerms {
                    contact,
                    root_acc,
                    root_orientation,
                    joint_positions,
                    torques,
                    joint_acc,
                    action_rate,
                    action_acc,
                };
                let breakdown = reward::total_reward(&terms, &self.config.weights);
                self.history.advance(&setpoints);
                self.state = next;
                self.steps += 1;
                if self.steps >= self.config.horizon_steps() {
                    self.done = true;
                }
                let observation = self.observation()?;
                self.prev_motions = dynamics::body_motions(&self.model, &self.state)?;
                Ok(StepOutcome {
                    observation,
                    reward: breakdown,
                    terms,
                    report,
                    done: self.done,
                    failed: false,
                })
            }
            Err(SimError::NonFinite { .. }) => {
                // Simulator blow-ups reflect integrator limits, not policy
                // quality: flag the episode for discarding with a zero
                // reward instead of a penalty. The pre-step state is still
                // valid, so the observation repeats it and stays finite.
                self.done = true;
                self.failed = true;
                let observation = self.observation()?;
                Ok(StepOutcome {
                    observation,
                    reward: RewardBreakdown::default(),
                    terms: RewardTerms::default(),
                    report: ContactReport::zeros(
                        self.model.n_bodies(),
                        self.model.components().len(),
                        self.model.n_joints(),
                    ),
                    done: true,
                    failed: true,
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Observation of the current state, noise-perturbed in training mode.
    fn observation(&mut self) -> Result<Observation, EpisodeError> {
        let phase = (self.steps as f64 * self.config.control_dt) / self.config.horizon;
        let mut obs = observe(
            &self.model,
            &self.sim.contact,
            &self.state,
            &self.goals[self.goal_index],
            &self.history,
            &self.prev_motions,
            self.config.control_dt,
            phase,
        )?;
        if self.config.training {
            let n = self.model.n_joints();
            let noise = self.config.noise;
            add_noise(&mut obs.actor[0..4], noise.orientation, &mut self.rng);
            add_noise(&mut obs.actor[4..10], noise.root_vel, &mut self.rng);
            add_noise(&mut obs.actor[10..10 + n], noise.joints, &mut self.rng);
            add_noise(&mut obs.actor[10 + n..10 + 2 * n], noise.joint_vel, &mut self.rng);
        }
        Ok(obs)
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Goal pose of the current episode.
    pub fn end_pose(&self) -> &EndPose {
        &self.goals[self.goal_index]
    }

    pub fn schedule(&self) -> &DisturbanceSchedule {
        &self.schedule
    }

    /// Control steps taken in the current episode.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Episode time, s.
    pub fn time(&self) -> f64 {
        self.steps as f64 * self.config.control_dt
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn failed(&self) -> bool {
        self.failed
    }
}

/// Adds zero-mean Gaussian noise with standard deviation `std` to every
/// entry. Draws happen even at `std = 0`, so the rng stream does not depend
/// on the noise configuration.
fn add_noise<R: Rng>(slice: &mut [f64], std: f64, rng: &mut R) {
    for x in slice {
        let z: f64 = rng.sample(StandardNormal);
        *x += std * z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::geodesic_distance;
    use crate::model::{Body, CollisionSphere, Component, Joint};
    use crate::posegen::PoseSource;
    use crate::testutil;
    use alloc::string::ToString;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Unit};
    use proptest::prelude::*;

    const DEG30: f64 = 30.0 * core::f64::consts::PI / 180.0;

    /// An arbitrary goal; episode logic accepts any end pose, settled or not.
    fn fixed_goal(model: &RobotModel) -> EndPose {
        let orientation = UnitQuaternion::from_euler_angles(0.15, -0.3, 0.8);
        EndPose {
            root_orientation: orientation,
            joints: model.default_setpoints(),
            bin: crate::posegen::orientation_bin(&orientation, 26),
            source: PoseSource::Authored,
        }
    }

    fn biped_env(config: EpisodeConfig, seed: u64) -> Environment {
        let model = testutil::planar_biped();
        let goal = fixed_goal(&model);
        Environment::new(model, SimParams::default(), config, vec![goal], seed).unwrap()
    }

    #[test]
    fn initial_state_ranges_hold_over_many_samples() {
        let model = testutil::planar_biped();
        let ranges = InitialStateRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10_000 {
            let state = sample_initial_state(&model, &ranges, 0.02, 100, &mut rng).unwrap();
            let (roll, pitch, yaw) = state.pose.root_orientation.euler_angles();
            assert!(roll.abs() <= DEG30 + 1e-9, "roll {roll}");
            assert!(pitch.abs() <= DEG30 + 1e-9, "pitch {pitch}");
            assert!(yaw.abs() <= 1e-9, "yaw {yaw}");
            assert!(state.root_lin_vel.amax() <= 2.0);
            assert!(state.root_ang_vel.amax() <= 0.5);
            assert!(state.joint_vel.iter().all(|v| v.abs() <= 0.5));
            assert!(model.within_limits(&state.pose.joints).unwrap());
            assert!(!model.self_collision(&state.pose).unwrap());
            let centers = model.sphere_centers(&state.pose).unwrap();
            let lowest = centers
                .iter()
                .zip(model.spheres())
                .map(|(c, s)| c.z - s.radius)
                .fold(f64::INFINITY, f64::min);
            assert_abs_diff_eq!(lowest, 0.02, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_ranges_recover_reference_state() {
        let model = testutil::planar_biped();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state =
            sample_initial_state(&model, &InitialStateRanges::zero(), 0.02, 10, &mut rng).unwrap();
        assert!(geodesic_distance(&state.pose.root_orientation, &UnitQuaternion::identity()) < 1e-12);
        for (q, s) in state.pose.joints.iter().zip(model.default_setpoints()) {
            assert_abs_diff_eq!(*q, s, epsilon = 1e-12);
        }
        assert_eq!(state.root_lin_vel, Vector3::zeros());
        assert_eq!(state.root_ang_vel, Vector3::zeros());
        assert!(state.joint_vel.iter().all(|v| *v == 0.0));
        assert_eq!(state.pose.root_position.x, 0.0);
        assert_eq!(state.pose.root_position.y, 0.0);
    }

    #[test]
    fn initial_state_sampling_is_reproducible() {
        let model = testutil::planar_biped();
        let ranges = InitialStateRanges::default();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_initial_state(&model, &ranges, 0.02, 100, &mut rng).unwrap()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn impossible_geometry_exhausts_sample_budget() {
        // The tip sphere orbits the base sphere at a distance that exceeds
        // the radius sum only while |q0 + q1| stays below about 1e-4 rad, so
        // the default pose validates but a uniform draw over ±3 rad per
        // joint essentially never lands in the collision-free sliver.
        let diag = |v: f64| Matrix3::from_diagonal(&Vector3::new(v, v, v));
        let body = |name: &str, parent, joint| Body {
            name: name.to_string(),
            parent,
            attach_translation: Vector3::zeros(),
            attach_rotation: UnitQuaternion::identity(),
            joint,
            mass: 1.0,
            com: Vector3::zeros(),
            inertia: diag(0.01),
            component: 0,
        };
        let joint = || Joint {
            axis: Unit::new_normalize(Vector3::z()),
            lower: -3.0,
            upper: 3.0,
            velocity_limit: 10.0,
            torque_limit: 10.0,
            kp: 1.0,
            kd: 0.1,
            setpoint_default: 0.0,
        };
        let near_tangent = 1.2 * (5e-5f64).cos() - 0.6;
        let model = RobotModel::new(
            vec![
                body("base", None, None),
                body("mid", Some(0), Some(0)),
                body("tip", Some(1), Some(1)),
            ],
            vec![joint(), joint()],
            vec![
                CollisionSphere {
                    body: 0,
                    offset: Vector3::new(-0.6, 0.0, 0.0),
                    radius: 0.6,
                },
                CollisionSphere {
                    body: 2,
                    offset: Vector3::new(0.6, 0.0, 0.0),
                    radius: near_tangent,
                },
            ],
            vec![Component {
                name: "all".to_string(),
                weight: 1.0,
            }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_initial_state(&model, &InitialStateRanges::default(), 0.02, 50, &mut rng)
            .unwrap_err();
        assert_eq!(err, EpisodeError::SampleBudget { attempts: 50 });
    }

    #[test]
    fn disturbance_windows_respect_bounds() {
        let config = DisturbanceConfig {
            groups: vec![DisturbanceGroup::burst(vec![0])],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let schedule = DisturbanceSchedule::sample(&config, 30.0, &mut rng);
        let windows = schedule.windows();
        assert!(!windows.is_empty());
        assert_eq!(windows[0].start, 0.0);
        for (i, w) in windows.iter().enumerate() {
            assert_eq!(w.body, 0);
            let duration = w.end - w.start;
            assert!((0.25..=2.0).contains(&duration), "on {duration}");
            assert!(w.force.amax() <= 5.0);
            assert!(w.torque.amax() <= 0.25);
            if i > 0 {
                let gap = w.start - windows[i - 1].end;
                assert!((1.0..=3.0).contains(&gap), "off {gap}");
            }
        }
    }

    #[test]
    fn sustained_durations_cover_their_range() {
        let config = DisturbanceConfig {
            groups: vec![DisturbanceGroup::sustained(vec![3])],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut durations = Vec::new();
        while durations.len() < 10_000 {
            let schedule = DisturbanceSchedule::sample(&config, 120.0, &mut rng);
            durations.extend(schedule.windows().iter().map(|w| w.end - w.start));
        }
        assert!(durations.iter().all(|d| (2.0..=10.0).contains(d)));
        let min = durations.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = durations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min < 2.1, "shortest observed duration {min}");
        assert!(max > 9.9, "longest observed duration {max}");
    }

    #[test]
    fn disturbances_only_run_in_training() {
        let groups = vec![
            DisturbanceGroup::burst(vec![3, 5]),
            DisturbanceGroup::sustained(vec![0, 1]),
        ];
        let training = EpisodeConfig {
            disturbances: DisturbanceConfig { groups: groups.clone() },
            ..EpisodeConfig::default()
        };
        let mut env = biped_env(training, 2);
        env.reset().unwrap();
        assert!(!env.schedule().windows().is_empty());

        let eval = EpisodeConfig {
            disturbances: DisturbanceConfig { groups },
            training: false,
            ..EpisodeConfig::default()
        };
        let mut env = biped_env(eval, 2);
        env.reset().unwrap();
        assert!(env.schedule().windows().is_empty());
        for k in 0..10 {
            assert!(env.schedule().active(0.4 * k as f64).is_empty());
        }

        let no_groups = EpisodeConfig::default();
        let mut env = biped_env(no_groups, 2);
        env.reset().unwrap();
        assert!(env.schedule().windows().is_empty());
    }

    #[test]
    fn goal_rotates_against_robot_yaw() {
        let model = testutil::planar_biped();
        let goal = fixed_goal(&model);
        let base = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.3);
        let mut state = SimState::from_pose(Pose::new(
            Vector3::new(0.4, -0.2, 0.6),
            base,
            model.default_setpoints(),
        ));
        let (goal0, _) = transform_goal(&goal, &state);
        let alpha = 0.9;
        state.pose.root_orientation =
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), alpha) * base;
        let (goal_alpha, joints) = transform_goal(&goal, &state);
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -alpha) * goal0;
        // Rounding passes through acos, so exact agreement still reads ~1e-8.
        assert!(geodesic_distance(&goal_alpha, &expected) < 1e-6);
        assert_eq!(joints, goal.joints);
    }

    #[test]
    fn matching_orientation_scores_zero_tracking() {
        let model = testutil::planar_biped();
        let weights = RewardWeights::default();
        let world = UnitQuaternion::from_euler_angles(0.0, 0.5, 0.7);
        let goal = EndPose {
            root_orientation: world,
            joints: model.default_setpoints(),
            bin: crate::posegen::orientation_bin(&world, 26),
            source: PoseSource::Authored,
        };
        let state = SimState::from_pose(Pose::new(
            Vector3::new(0.0, 0.0, 0.5),
            world,
            model.default_setpoints(),
        ));
        let (goal_orientation, goal_joints) = transform_goal(&goal, &state);
        let (orientation_term, joints_term) =
            reward::tracking_reward(&state, &goal_orientation, &goal_joints, 10.0, &weights);
        assert_abs_diff_eq!(orientation_term, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(joints_term, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn yaw_drift_leaves_orientation_term_fixed() {
        let model = testutil::planar_biped();
        let weights = RewardWeights::default();
        let goal = fixed_goal(&model);
        let term_for = |yaw: f64| {
            let orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.4);
            let state = SimState::from_pose(Pose::new(
                Vector3::new(0.0, 0.0, 0.5),
                orientation,
                model.default_setpoints(),
            ));
            let (goal_orientation, goal_joints) = transform_goal(&goal, &state);
            reward::tracking_reward(&state, &goal_orientation, &goal_joints, 10.0, &weights).0
        };
        let reference = term_for(0.0);
        for yaw in [-2.5, -0.7, 0.3, 1.9] {
            assert_abs_diff_eq!(term_for(yaw), reference, epsilon = 1e-12);
        }
    }

    #[test]
    fn episode_runs_exactly_horizon_steps() {
        let model = testutil::pendulum();
        let goal = EndPose {
            root_orientation: UnitQuaternion::identity(),
            joints: model.default_setpoints(),
            bin: 4,
            source: PoseSource::Authored,
        };
        let config = EpisodeConfig {
            training: false,
            ..EpisodeConfig::default()
        };
        assert_eq!(config.horizon_steps(), 200);
        let mut env =
            Environment::new(model, SimParams::default(), config, vec![goal], 1).unwrap();
        env.reset().unwrap();
        let action = env.model().default_setpoints();
        let mut steps = 0;
        loop {
            let outcome = env.step(&action).unwrap();
            steps += 1;
            assert!(!outcome.failed);
            assert_eq!(outcome.done, steps == 200, "done at step {steps}");
            if outcome.done {
                break;
            }
        }
        assert_eq!(steps, 200);
        assert_eq!(env.steps(), 200);
        assert_abs_diff_eq!(env.time(), 4.0, epsilon = 1e-9);
        assert_eq!(env.step(&action), Err(EpisodeError::EpisodeOver));
    }

    #[test]
    fn holding_still_on_the_ground_stays_quiet() {
        // Start from a settled resting state, where contact rather than
        // actuation carries gravity. Commanding the current joints each
        // step then keeps the robot at rest, and the contact forces carry
        // roughly the robot's weight (14.6 kg at 9.81 m/s² is about 143 N).
        let model = testutil::planar_biped();
        let sim = SimParams::default();
        let mut tipped = SimState::from_pose(model.default_pose());
        tipped.pose.root_orientation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 1.2);
        let centers = model.sphere_centers(&tipped.pose).unwrap();
        let lowest = centers
            .iter()
            .zip(model.spheres())
            .map(|(c, s)| c.z - s.radius)
            .fold(f64::INFINITY, f64::min);
        tipped.pose.root_position.z = 0.02 - lowest;
        let setpoints = model.default_setpoints();
        let (rest, settled) =
            dynamics::settle(&model, &sim, &tipped, 10.0, &setpoints, 10.0, 0.05, 0.5, 0.3)
                .unwrap();
        assert!(settled, "biped failed to settle before the check");

        let config = EpisodeConfig {
            training: false,
            horizon: 2.0,
            ..EpisodeConfig::default()
        };
        let mut env = biped_env(config, 3);
        env.reset_from(rest).unwrap();
        let weight = 14.6 * 9.81;
        let mut quiet_joints = Vec::new();
        for step in 0..100 {
            let action = env.state().pose.joints.clone();
            let outcome = env.step(&action).unwrap();
            assert!(!outcome.failed);
            // The settle ran at a stiffer gain than the episode applies, so
            // the posture shakes out briefly before the assertions begin.
            if step < 25 {
                continue;
            }
            if quiet_joints.is_empty() {
                quiet_joints = env.state().pose.joints.clone();
            }
            let support: f64 = outcome.report.component_forces.iter().map(|f| f.z).sum();
            assert!(
                (support - weight).abs() < 0.15 * weight,
                "step {step}: support {support} N vs weight {weight} N"
            );
            let motions = dynamics::body_motions(env.model(), env.state()).unwrap();
            assert!(motions.iter().all(|m| m.com_vel.norm() < 0.1));
        }
        // Once quiet, the posture holds.
        for (q, q0) in env.state().pose.joints.iter().zip(&quiet_joints) {
            assert!((q - q0).abs() < 0.05, "joint drifted {} rad", (q - q0).abs());
        }
    }

    #[test]
    fn observation_dimensions_match_layout() {
        let mut env = biped_env(EpisodeConfig::default(), 11);
        let n = env.model().n_joints();
        let nb = env.model().n_bodies();
        assert_eq!((n, nb), (6, 9));
        assert_eq!(actor_dim(n), 44);
        assert_eq!(critic_dim(n, nb), 156);
        let obs = env.reset().unwrap();
        assert_eq!(obs.actor.len(), 44);
        assert_eq!(obs.critic.len(), 156);
        let action = env.model().default_setpoints();
        for _ in 0..5 {
            let outcome = env.step(&action).unwrap();
            assert_eq!(outcome.observation.actor.len(), 44);
            assert_eq!(outcome.observation.critic.len(), 156);
            assert!(outcome.observation.actor.iter().all(|x| x.is_finite()));
            assert!(outcome.observation.critic.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn critic_begins_with_the_noiseless_actor() {
        // Same seed, training versus evaluation: the initial draw matches,
        // so the training critic must open with exactly the clean actor
        // vector the evaluation env reports.
        let training = biped_env(EpisodeConfig::default(), 21).reset_obs();
        let eval = biped_env(
            EpisodeConfig {
                training: false,
                ..EpisodeConfig::default()
            },
            21,
        )
        .reset_obs();
        let a = actor_dim(6);
        assert_eq!(&training.critic[..a], &eval.actor[..]);
        assert_eq!(&eval.critic[..a], &eval.actor[..]);
        // The training actor itself is the noisy view.
        assert_ne!(&training.actor[..], &eval.actor[..]);
    }

    #[test]
    fn noise_perturbs_only_sensor_channels() {
        let n = 6;
        let mut deltas_orientation = Vec::new();
        let mut deltas_joint_vel = Vec::new();
        for seed in 0..500 {
            let mut env = biped_env(EpisodeConfig::default(), seed);
            let noisy = env.reset().unwrap();
            // The clean reference is reconstructible from public state: at
            // reset the history holds the initial joints and the previous
            // motions equal the current ones.
            let clean = observe(
                env.model(),
                &SimParams::default().contact,
                env.state(),
                env.end_pose(),
                &ActionHistory::new(&env.state().pose.joints),
                &dynamics::body_motions(env.model(), env.state()).unwrap(),
                env.config().control_dt,
                0.0,
            )
            .unwrap();
            assert_eq!(noisy.actor[10 + 2 * n..], clean.actor[10 + 2 * n..]);
            assert_eq!(noisy.critic, clean.critic);
            deltas_orientation.push(noisy.actor[0] - clean.actor[0]);
            deltas_joint_vel.push(noisy.actor[10 + n] - clean.actor[10 + n]);
        }
        let std = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64)
                .sqrt()
        };
        let s_orientation = std(&deltas_orientation);
        let s_joint_vel = std(&deltas_joint_vel);
        assert!(
            (s_orientation - 0.01).abs() < 0.0015,
            "orientation noise std {s_orientation}"
        );
        assert!(
            (s_joint_vel - 0.1).abs() < 0.015,
            "joint velocity noise std {s_joint_vel}"
        );
    }

    #[test]
    fn reward_stream_is_reproducible() {
        let config = EpisodeConfig {
            disturbances: DisturbanceConfig {
                groups: vec![
                    DisturbanceGroup::burst(vec![3, 5, 7]),
                    DisturbanceGroup::sustained(vec![0, 1]),
                ],
            },
            horizon: 1.0,
            ..EpisodeConfig::default()
        };
        let run = |seed: u64| {
            let mut env = biped_env(config.clone(), seed);
            let mut observations = vec![env.reset().unwrap()];
            let action = env.end_pose().joints.clone();
            let mut rewards = Vec::new();
            while !env.done() {
                let outcome = env.step(&action).unwrap();
                rewards.push(outcome.reward);
                observations.push(outcome.observation);
            }
            (rewards, observations)
        };
        let (rewards_a, obs_a) = run(6);
        let (rewards_b, obs_b) = run(6);
        assert_eq!(rewards_a, rewards_b);
        assert_eq!(obs_a, obs_b);
        let (rewards_c, _) = run(7);
        assert_ne!(rewards_a, rewards_c);
    }

    #[test]
    fn disturbances_alter_the_trajectory() {
        // Same seed with and without disturbance groups: the initial state
        // draw matches (the schedule is drawn afterwards), so any
        // divergence comes from the applied wrenches.
        let with = EpisodeConfig {
            disturbances: DisturbanceConfig {
                groups: vec![DisturbanceGroup::sustained(vec![0])],
            },
            ..EpisodeConfig::default()
        };
        let without = EpisodeConfig::default();
        let mut env_with = biped_env(with, 17);
        let mut env_without = biped_env(without, 17);
        env_with.reset().unwrap();
        env_without.reset().unwrap();
        assert_eq!(env_with.state(), env_without.state());
        let action = env_with.model().default_setpoints();
        for _ in 0..25 {
            env_with.step(&action).unwrap();
            env_without.step(&action).unwrap();
        }
        let dv = (env_with.state().root_lin_vel - env_without.state().root_lin_vel).norm();
        let dp =
            (env_with.state().pose.root_position - env_without.state().pose.root_position).norm();
        assert!(
            dv > 1e-4 || dp > 1e-4,
            "disturbances had no effect: dv {dv}, dp {dp}"
        );
    }

    #[test]
    fn actions_clamp_to_joint_limits() {
        let config = EpisodeConfig {
            training: false,
            ..EpisodeConfig::default()
        };
        let mut wild = biped_env(config.clone(), 23);
        let mut clamped = biped_env(config, 23);
        wild.reset().unwrap();
        clamped.reset().unwrap();
        let n = wild.model().n_joints();
        let uppers: Vec<f64> = wild.model().joints().iter().map(|j| j.upper).collect();
        let a = wild.step(&vec![100.0; n]).unwrap();
        let b = clamped.step(&uppers).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failure_flags_terminal_without_penalty() {
        let mut sim = SimParams::default();
        sim.contact.stiffness = 1e300;
        let model = testutil::planar_biped();
        let goal = fixed_goal(&model);
        let config = EpisodeConfig {
            training: false,
            ..EpisodeConfig::default()
        };
        let mut env = Environment::new(model, sim, config, vec![goal], 29).unwrap();
        env.reset().unwrap();
        let action = env.model().default_setpoints();
        let mut failed = false;
        for _ in 0..200 {
            let outcome = env.step(&action).unwrap();
            if outcome.failed {
                assert!(outcome.done);
                assert_eq!(outcome.reward, RewardBreakdown::default());
                assert_eq!(outcome.reward.total, 0.0);
                assert!(outcome.observation.actor.iter().all(|x| x.is_finite()));
                failed = true;
                break;
            }
        }
        assert!(failed, "absurd stiffness never tripped the integrator");
        assert!(env.failed());
        assert_eq!(env.step(&action), Err(EpisodeError::EpisodeOver));
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        let model = testutil::planar_biped();
        let sim = SimParams::default();
        let goal = fixed_goal(&model);

        let err = Environment::new(
            model.clone(),
            sim,
            EpisodeConfig::default(),
            vec![],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, EpisodeError::BadDataset { .. }));

        let mut short = goal.clone();
        short.joints.pop();
        let err =
            Environment::new(model.clone(), sim, EpisodeConfig::default(), vec![short], 0)
                .unwrap_err();
        assert!(matches!(err, EpisodeError::BadDataset { .. }));

        let bad_body = EpisodeConfig {
            disturbances: DisturbanceConfig {
                groups: vec![DisturbanceGroup::burst(vec![99])],
            },
            ..EpisodeConfig::default()
        };
        let err = Environment::new(model.clone(), sim, bad_body, vec![goal.clone()], 0)
            .unwrap_err();
        assert!(matches!(err, EpisodeError::Config { .. }));

        let bad_horizon = EpisodeConfig {
            horizon: 0.0,
            ..EpisodeConfig::default()
        };
        let err = Environment::new(model.clone(), sim, bad_horizon, vec![goal.clone()], 0)
            .unwrap_err();
        assert!(matches!(err, EpisodeError::Config { .. }));

        let mut env = Environment::new(model, sim, EpisodeConfig::default(), vec![goal], 0)
            .unwrap();
        // Stepping before any reset is a protocol error.
        assert_eq!(env.step(&vec![0.0; 6]), Err(EpisodeError::EpisodeOver));
        env.reset().unwrap();
        assert!(matches!(
            env.step(&[0.0; 3]),
            Err(EpisodeError::ActionLength { expected: 6, got: 3 })
        ));
    }

    /// Builds the paired scenes for the invariance property: scene B is
    /// scene A rotated by `alpha` about z and translated horizontally.
    fn rotated_scene(
        state: &SimState,
        goal: &EndPose,
        alpha: f64,
        shift: Vector3<f64>,
    ) -> (SimState, EndPose) {
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), alpha);
        let mut s = state.clone();
        s.pose.root_position = rz * state.pose.root_position + shift;
        s.pose.root_orientation = rz * state.pose.root_orientation;
        s.root_lin_vel = rz * state.root_lin_vel;
        s.root_lin_acc = rz * state.root_lin_acc;
        // Angular velocity is body-frame and unchanged by a world rotation.
        let mut g = goal.clone();
        g.root_orientation = rz * goal.root_orientation;
        (s, g)
    }

    proptest! {
        #[test]
        fn actor_observation_ignores_scene_yaw_and_translation(
            roll in -1.2f64..1.2,
            pitch in -1.5f64..1.5,
            yaw in -3.1f64..3.1,
            alpha in -3.1f64..3.1,
            dx in -5.0f64..5.0,
            dy in -5.0f64..5.0,
            draw_seed in 0u64..1_000,
        ) {
            let model = testutil::planar_biped();
            let n = model.n_joints();
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let mut draw = |lo: f64, hi: f64| rng.random_range(lo..=hi);

            let joints: Vec<f64> = model
                .joints()
                .iter()
                .map(|j| draw(j.lower, j.upper))
                .collect();
            let mut state = SimState::from_pose(Pose::new(
                Vector3::new(draw(-1.0, 1.0), draw(-1.0, 1.0), draw(0.3, 1.2)),
                UnitQuaternion::from_euler_angles(roll, pitch, yaw),
                joints,
            ));
            state.root_lin_vel = Vector3::new(draw(-2.0, 2.0), draw(-2.0, 2.0), draw(-2.0, 2.0));
            state.root_ang_vel = Vector3::new(draw(-1.0, 1.0), draw(-1.0, 1.0), draw(-1.0, 1.0));
            state.joint_vel = (0..n).map(|_| draw(-1.0, 1.0)).collect();

            // A previous state with different velocities makes the
            // finite-difference accelerations non-trivial.
            let mut prev = state.clone();
            prev.root_lin_vel = Vector3::new(draw(-2.0, 2.0), draw(-2.0, 2.0), draw(-2.0, 2.0));
            prev.root_ang_vel = Vector3::new(draw(-1.0, 1.0), draw(-1.0, 1.0), draw(-1.0, 1.0));
            prev.joint_vel = (0..n).map(|_| draw(-1.0, 1.0)).collect();

            let goal_orientation = UnitQuaternion::from_euler_angles(
                draw(-3.0, 3.0),
                draw(-3.0, 3.0),
                draw(-3.0, 3.0),
            );
            let goal = EndPose {
                root_orientation: goal_orientation,
                joints: model.joints().iter().map(|j| draw(j.lower, j.upper)).collect(),
                bin: crate::posegen::orientation_bin(&goal_orientation, 26),
                source: PoseSource::Generated,
            };
            let mut history = ActionHistory::new(&state.pose.joints);
            let older: Vec<f64> = (0..n).map(|_| draw(-1.0, 1.0)).collect();
            history.advance(&older);

            let shift = Vector3::new(dx, dy, 0.0);
            let (state_b, goal_b) = rotated_scene(&state, &goal, alpha, shift);
            let (prev_b, _) = rotated_scene(&prev, &goal, alpha, shift);

            let contact = SimParams::default().contact;
            let motions_a = dynamics::body_motions(&model, &prev).unwrap();
            let motions_b = dynamics::body_motions(&model, &prev_b).unwrap();
            let obs_a = observe(&model, &contact, &state, &goal, &history, &motions_a, 0.02, 0.37)
                .unwrap();
            let obs_b =
                observe(&model, &contact, &state_b, &goal_b, &history, &motions_b, 0.02, 0.37)
                    .unwrap();

            for (i, (a, b)) in obs_a.actor.iter().zip(&obs_b.actor).enumerate() {
                prop_assert!((a - b).abs() <= 1e-6, "actor[{}]: {} vs {}", i, a, b);
            }
            for (i, (a, b)) in obs_a.critic.iter().zip(&obs_b.critic).enumerate() {
                prop_assert!((a - b).abs() <= 1e-6, "critic[{}]: {} vs {}", i, a, b);
            }
        }

        #[test]
        fn canonical_quaternion_sign_is_stable(
            roll in -3.1f64..3.1,
            pitch in -1.5f64..1.5,
            yaw in -3.1f64..3.1,
        ) {
            let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
            let negated = UnitQuaternion::new_unchecked(-q.into_inner());
            prop_assert_eq!(canonical_coords(&q), canonical_coords(&negated));
            let c = canonical_coords(&q);
            let lead = c.iter().copied().find(|x| x.abs() > 0.1).unwrap();
            prop_assert!(lead > 0.0);
        }
    }

    impl Environment {
        /// Test helper: reset and return only the observation.
        fn reset_obs(mut self) -> Observation {
            self.reset().unwrap()
        }
    }

}
