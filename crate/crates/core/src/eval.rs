//! Damage and tracking metrics, standard falling baselines, and the
//! comparison and ablation harnesses built on them.
//!
//! Evaluation is deliberately clean: trials run without observation noise,
//! contact clipping, or disturbance wrenches, and a trained policy acts
//! through its mean. Every trial derives its rng stream from the report
//! seed and the trial index, so different strategies evaluated with the
//! same seed face identical initial states and goals — comparisons are
//! paired by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::UnitQuaternion;
#[allow(unused_imports)]
use num_traits::Float;

use crate::dynamics::{ContactReport, SimParams};
use crate::episode::{Environment, EpisodeConfig, EpisodeError};
use crate::frames;
use crate::model::{ModelError, RobotModel};
use crate::posegen::EndPose;
use crate::ppo::{self, GaussianPolicy, PpoConfig, PpoError, RunningNorm};

const STREAM_TRIAL: u64 = 5;

/// Errors from metric computation and trial harnesses.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Config { reason: &'static str },
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A trajectory lacks a channel the metrics need.
    MissingChannel { what: &'static str },
    Model(ModelError),
    Episode(EpisodeError),
    Ppo(PpoError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config { reason } => write!(f, "bad configuration: {reason}"),
            Self::Shape {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected {expected}, got {got}"),
            Self::MissingChannel { what } => write!(f, "trajectory is missing {what}"),
            Self::Model(e) => write!(f, "model rebuild failed: {e}"),
            Self::Episode(e) => write!(f, "episode failure: {e}"),
            Self::Ppo(e) => write!(f, "training failure: {e}"),
        }
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<EpisodeError> for EvalError {
    fn from(e: EpisodeError) -> Self {
        Self::Episode(e)
    }
}

impl From<PpoError> for EvalError {
    fn from(e: PpoError) -> Self {
        Self::Ppo(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

/// What a finished trial leaves behind for the metrics: the recorded
/// contact channel plus the final and goal configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTrajectory {
    /// One report per control step.
    pub contacts: Vec<ContactReport>,
    pub final_orientation: UnitQuaternion<f64>,
    pub final_joints: Vec<f64>,
    pub goal_orientation: UnitQuaternion<f64>,
    pub goal_joints: Vec<f64>,
}

/// Damage and tracking numbers for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    /// Largest per-body contact force magnitude over the episode, N.
    pub max_impact: f64,
    /// Largest per-body time-averaged contact force magnitude, N.
    pub mean_impact: f64,
    /// Root orientation error after optimal yaw alignment, rad.
    pub mroe: f64,
    /// Mean absolute joint error at the final step, rad.
    pub mje: f64,
    /// Peak contact force magnitude per component, N. Reported alongside
    /// the per-body peaks because force summaries are meaningful at both
    /// granularities.
    pub component_peaks: Vec<f64>,
    /// Peak contact force magnitude per body, N.
    pub body_peaks: Vec<f64>,
}

/// Computes the per-trial metrics from a recorded trajectory.
///
/// Max impact is the maximum over steps and bodies of the contact force
/// magnitude; mean impact takes each body's time-mean first and then the
/// maximum over bodies; the root orientation error measures the geodesic
/// distance to the goal after the best pure-yaw alignment; the joint error
/// is the mean absolute final-step deviation.
pub fn compute_metrics(trajectory: &TrialTrajectory) -> Result<TrialMetrics, EvalError> {
    let steps = trajectory.contacts.len();
    if steps == 0 {
        return Err(EvalError::MissingChannel {
            what: "contact reports",
        });
    }
    if trajectory.final_joints.len() != trajectory.goal_joints.len() {
        return Err(EvalError::Shape {
            what: "final joint count",
            expected: trajectory.goal_joints.len(),
            got: trajectory.final_joints.len(),
        });
    }
    let n_bodies = trajectory.contacts[0].body_forces.len();
    let n_components = trajectory.contacts[0].component_forces.len();
    for report in &trajectory.contacts {
        if report.body_forces.len() != n_bodies {
            return Err(EvalError::Shape {
                what: "per-body force count",
                expected: n_bodies,
                got: report.body_forces.len(),
            });
        }
        if report.component_forces.len() != n_components {
            return Err(EvalError::Shape {
                what: "per-component force count",
                expected: n_components,
                got: report.component_forces.len(),
            });
        }
    }

    let mut body_peaks = alloc::vec![0.0; n_bodies];
    let mut body_sums = alloc::vec![0.0; n_bodies];
    let mut component_peaks = alloc::vec![0.0; n_components];
    for report in &trajectory.contacts {
        for (b, f) in report.body_forces.iter().enumerate() {
            let mag = f.norm();
            body_peaks[b] = body_peaks[b].max(mag);
            body_sums[b] += mag;
        }
        for (c, f) in report.component_forces.iter().enumerate() {
            component_peaks[c] = component_peaks[c].max(f.norm());
        }
    }
    let max_impact = body_peaks.iter().fold(0.0f64, |a, &b| a.max(b));
    let mean_impact = body_sums
        .iter()
        .map(|s| s / steps as f64)
        .fold(0.0f64, f64::max);

    let aligned = frames::yaw_align(&trajectory.final_orientation, &trajectory.goal_orientation);
    let mroe = frames::geodesic_distance(&aligned, &trajectory.goal_orientation);
    let mje = trajectory
        .final_joints
        .iter()
        .zip(&trajectory.goal_joints)
        .map(|(q, g)| (q - g).abs())
        .sum::<f64>()
        / trajectory.final_joints.len().max(1) as f64;

    Ok(TrialMetrics {
        max_impact,
        mean_impact,
        mroe,
        mje,
        component_peaks,
        body_peaks,
    })
}

/// Mean, standard deviation, median, and 95th percentile of a metric
/// column. The deviation is the population form; the percentile uses the
/// nearest-rank rule on the sorted values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p95: f64,
}

impl Aggregate {
    /// `None` when there are no values to aggregate.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).max(1);
        Some(Self {
            mean,
            std: var.sqrt(),
            median,
            p95: sorted[rank - 1],
        })
    }
}

/// Per-trial metric rows plus the bookkeeping needed to recompute every
/// aggregate from them. Trials that hit an integration failure contribute
/// no row and are counted separately.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trials: Vec<TrialMetrics>,
    pub failures: usize,
    /// Trials requested (successful rows plus failures).
    pub requested: usize,
    pub seed: u64,
}

impl EvalReport {
    fn column<F: Fn(&TrialMetrics) -> f64>(&self, f: F) -> Vec<f64> {
        self.trials.iter().map(f).collect()
    }

    pub fn max_impact_stats(&self) -> Option<Aggregate> {
        Aggregate::from_values(&self.column(|t| t.max_impact))
    }

    pub fn mean_impact_stats(&self) -> Option<Aggregate> {
        Aggregate::from_values(&self.column(|t| t.mean_impact))
    }

    pub fn mroe_stats(&self) -> Option<Aggregate> {
        Aggregate::from_values(&self.column(|t| t.mroe))
    }

    pub fn mje_stats(&self) -> Option<Aggregate> {
        Aggregate::from_values(&self.column(|t| t.mje))
    }

    /// Aggregate over one component's peak forces; `None` when the index
    /// is out of range for any trial (or there are no trials).
    pub fn component_peak_stats(&self, component: usize) -> Option<Aggregate> {
        let values: Option<Vec<f64>> = self
            .trials
            .iter()
            .map(|t| t.component_peaks.get(component).copied())
            .collect();
        Aggregate::from_values(&values?)
    }

    /// Aggregate over one body's peak forces.
    pub fn body_peak_stats(&self, body: usize) -> Option<Aggregate> {
        let values: Option<Vec<f64>> = self
            .trials
            .iter()
            .map(|t| t.body_peaks.get(body).copied())
            .collect();
        Aggregate::from_values(&values?)
    }
}

/// The standard falling strategies a trained policy is compared against.
/// Each one holds the joints it had when the fall began ("activation") and
/// differs only in actuation strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Actuators off entirely. Realized as a zero gain scale, which makes
    /// the PD law emit exactly zero torque.
    ZeroTorque,
    /// Low-gain damping: one tenth of the nominal gains.
    Damped,
    /// Stiff freeze: ten times the nominal gains.
    Frozen,
}

impl BaselineKind {
    pub fn gain_scale(self) -> f64 {
        match self {
            Self::ZeroTorque => 0.0,
            Self::Damped => 0.1,
            Self::Frozen => 10.0,
        }
    }
}

/// A strategy [`run_trials`] can roll out.
#[derive(Debug, Clone, Copy)]
pub enum RolloutPolicy<'a> {
    /// Deterministic trained policy: the network mean, offset from the
    /// default setpoints, under the normalizer it was trained with.
    Trained {
        actor: &'a GaussianPolicy,
        norm: &'a RunningNorm,
    },
    Baseline(BaselineKind),
}

/// Rng seed of one evaluation trial. Exposed so callers can reproduce a
/// specific trial's initial conditions with [`Environment::reseed`].
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    ppo::derive_seed(seed, STREAM_TRIAL, trial as u64, 0)
}

/// Runs `n` seeded trials of one strategy over the test poses and collects
/// the metric rows. Training aids are forced off (`training = false`);
/// baselines additionally override the gain scale. Trials whose
/// integration fails are counted in `failures` and contribute no row.
///
/// Callers comparing strategies should pass the same `seed` (and disjoint
/// train/test pose sets — this function cannot check provenance).
pub fn run_trials(
    policy: &RolloutPolicy<'_>,
    model: &RobotModel,
    sim: SimParams,
    episode: &EpisodeConfig,
    goals: &[EndPose],
    n: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if n == 0 {
        return Err(EvalError::Config {
            reason: "at least one trial is required",
        });
    }
    run_trial_block(policy, model, sim, episode, goals, 0, n, seed)
}

/// Runs the contiguous slice `first .. first + count` of the trial stream
/// defined by `seed`. Because a trial's rng depends only on the seed and
/// its index, concatenating block reports in index order reproduces
/// [`run_trials`] exactly — this is the unit parallel evaluation drivers
/// fan out. A zero `count` yields an empty report.
#[allow(clippy::too_many_arguments)]
pub fn run_trial_block(
    policy: &RolloutPolicy<'_>,
    model: &RobotModel,
    sim: SimParams,
    episode: &EpisodeConfig,
    goals: &[EndPose],
    first: usize,
    count: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut config = episode.clone();
    config.training = false;
    if let RolloutPolicy::Baseline(kind) = policy {
        config.gain_scale = kind.gain_scale();
    }
    let defaults = model.default_setpoints();
    let steps = config.horizon_steps();
    let mut env = Environment::new(model.clone(), sim, config, goals.to_vec(), 0)?;
    let mut trials = Vec::with_capacity(count);
    let mut failures = 0;
    for trial in first..first + count {
        env.reseed(trial_seed(seed, trial));
        let mut obs = env.reset()?;
        let activation = env.state().pose.joints.clone();
        let goal = env.end_pose().clone();
        let mut contacts = Vec::with_capacity(steps);
        let mut failed = false;
        for _ in 0..steps {
            let action = match policy {
                RolloutPolicy::Trained { actor, norm } => {
                    let mean = actor.net.forward(&norm.normalize(&obs.actor)?)?;
                    defaults
                        .iter()
                        .zip(mean.iter())
                        .map(|(d, m)| d + m)
                        .collect::<Vec<f64>>()
                }
                RolloutPolicy::Baseline(_) => activation.clone(),
            };
            let outcome = env.step(&action)?;
            contacts.push(outcome.report);
            if outcome.failed {
                failed = true;
                break;
            }
            obs = outcome.observation;
            if outcome.done {
                break;
            }
        }
        if failed {
            failures += 1;
            continue;
        }
        let trajectory = TrialTrajectory {
            contacts,
            final_orientation: env.state().pose.root_orientation,
            final_joints: env.state().pose.joints.clone(),
            goal_orientation: goal.root_orientation,
            goal_joints: goal.joints.clone(),
        };
        trials.push(compute_metrics(&trajectory)?);
    }
    Ok(EvalReport {
        trials,
        failures,
        requested: count,
        seed,
    })
}

/// Shared inputs for an ablation sweep: the training problem, the held-out
/// test poses, and the evaluation size. Every grid point trains with the
/// same seed and evaluates on the same trial streams, so the resulting
/// reports are paired.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub model: RobotModel,
    pub sim: SimParams,
    /// Training-mode episode configuration; evaluation derives its clean
    /// variant from it.
    pub episode: EpisodeConfig,
    pub train_goals: Vec<EndPose>,
    pub test_goals: Vec<EndPose>,
    pub ppo: PpoConfig,
    /// Evaluation trials per grid point.
    pub trials: usize,
    pub seed: u64,
}

/// Which knob an [`ablation_sweep`] turns.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationKind {
    /// Retrain with each contact-force reward weight.
    ContactWeight { weights: Vec<f64> },
    /// Retrain on a prefix of the training poses per fraction in (0, 1].
    DatasetSize { fractions: Vec<f64> },
    /// Two paired points: uniform component weights, then the designated
    /// component raised to `weight` (others stay at 1).
    Sensitivity { component: usize, weight: f64 },
}

/// One grid point's label and evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub report: EvalReport,
}

fn with_component_weights(model: &RobotModel, weights: &[f64]) -> Result<RobotModel, EvalError> {
    let mut components = model.components().to_vec();
    if weights.len() != components.len() {
        return Err(EvalError::Shape {
            what: "component weight count",
            expected: components.len(),
            got: weights.len(),
        });
    }
    for (c, w) in components.iter_mut().zip(weights) {
        c.weight = *w;
    }
    Ok(RobotModel::new(
        model.bodies().to_vec(),
        model.joints().to_vec(),
        model.spheres().to_vec(),
        components,
    )?)
}

fn train_and_eval(
    label: String,
    model: &RobotModel,
    episode: &EpisodeConfig,
    train_goals: &[EndPose],
    base: &SweepSetup,
) -> Result<SweepPoint, EvalError> {
    let state = ppo::train(
        model.clone(),
        base.sim,
        episode.clone(),
        train_goals.to_vec(),
        base.ppo.clone(),
        base.seed,
        |_| {},
    )?;
    let policy = RolloutPolicy::Trained {
        actor: &state.actor,
        norm: &state.actor_norm,
    };
    let report = run_trials(
        &policy,
        model,
        base.sim,
        episode,
        &base.test_goals,
        base.trials,
        base.seed,
    )?;
    Ok(SweepPoint { label, report })
}

/// Trains one policy per grid point and evaluates each on the shared test
/// poses and trial streams. Points come back in grid order.
pub fn ablation_sweep(kind: &AblationKind, base: &SweepSetup) -> Result<Vec<SweepPoint>, EvalError> {
    let mut points = Vec::new();
    match kind {
        AblationKind::ContactWeight { weights } => {
            if weights.is_empty() {
                return Err(EvalError::Config {
                    reason: "contact-weight grid is empty",
                });
            }
            for &w in weights {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(EvalError::Config {
                        reason: "contact weights must be finite and non-negative",
                    });
                }
                let mut episode = base.episode.clone();
                episode.weights.contact = w;
                points.push(train_and_eval(
                    format!("contact_weight={w}"),
                    &base.model,
                    &episode,
                    &base.train_goals,
                    base,
                )?);
            }
        }
        AblationKind::DatasetSize { fractions } => {
            if fractions.is_empty() {
                return Err(EvalError::Config {
                    reason: "dataset-size grid is empty",
                });
            }
            for &f in fractions {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(EvalError::Config {
                        reason: "dataset fractions must lie in (0, 1]",
                    });
                }
                let count = ((f * base.train_goals.len() as f64).ceil() as usize)
                    .clamp(1, base.train_goals.len());
                points.push(train_and_eval(
                    format!("dataset_fraction={f}"),
                    &base.model,
                    &base.episode,
                    &base.train_goals[..count],
                    base,
                )?);
            }
        }
        AblationKind::Sensitivity { component, weight } => {
            let n = base.model.components().len();
            if *component >= n {
                return Err(EvalError::Shape {
                    what: "sensitivity component index",
                    expected: n,
                    got: *component,
                });
            }
            if !(weight.is_finite() && *weight > 0.0) {
                return Err(EvalError::Config {
                    reason: "sensitivity weight must be finite and positive",
                });
            }
            let uniform = alloc::vec![1.0; n];
            let mut raised = uniform.clone();
            raised[*component] = *weight;
            let base_model = with_component_weights(&base.model, &uniform)?;
            points.push(train_and_eval(
                String::from("uniform_weights"),
                &base_model,
                &base.episode,
                &base.train_goals,
                base,
            )?);
            let name = &base.model.components()[*component].name;
            let raised_model = with_component_weights(&base.model, &raised)?;
            points.push(train_and_eval(
                format!("{name}_weight={weight}"),
                &raised_model,
                &base.episode,
                &base.train_goals,
                base,
            )?);
        }
    }
    Ok(points)
}
