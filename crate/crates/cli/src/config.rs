//! Run settings: presets, config files, and `--set` overrides.
//!
//! A preset resolves every parameter up front; a config file and then any
//! `--set key=value` flags override individual fields on top of it. The
//! fully resolved settings serialize back to TOML, and the hash of that
//! text is stamped into every artifact a run produces, so an output file
//! always names the exact configuration that made it.
//!
//! Settings mirror the engine's parameter structs field-for-field instead
//! of serializing them directly; the file schema stays stable even if the
//! engine types change shape.

use serde::{Deserialize, Serialize};

use softfall_core::dynamics::{ContactParams, SimParams};
use softfall_core::episode::{
    DisturbanceConfig, DisturbanceGroup, EpisodeConfig, InitialStateRanges, NoiseParams,
};
use softfall_core::model::RobotModel;
use softfall_core::posegen::GenParams;
use softfall_core::ppo::PpoConfig;
use softfall_core::reward::RewardWeights;

use crate::{content_hash, ToolError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Preset these settings started from, kept for provenance.
    pub preset: String,
    pub seed: u64,
    pub sim: SimSettings,
    pub episode: EpisodeSettings,
    pub reward: RewardSettings,
    pub ppo: PpoSettings,
    pub posegen: PosegenSettings,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub gravity: f64,
    pub substeps: usize,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub contact_friction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSettings {
    pub horizon: f64,
    pub control_dt: f64,
    pub height_margin: f64,
    pub sample_attempts: usize,
    /// `"off"` or `"standard"` (sustained pushes on the root, bursts on
    /// actuated leaf bodies).
    pub disturbances: String,
    pub roll_range: f64,
    pub pitch_range: f64,
    pub joint_span: f64,
    pub lin_vel_range: f64,
    pub ang_vel_range: f64,
    pub joint_vel_range: f64,
    pub noise_orientation: f64,
    pub noise_root_vel: f64,
    pub noise_joints: f64,
    pub noise_joint_vel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSettings {
    pub contact: f64,
    pub root_acc: f64,
    pub root_orientation: f64,
    pub joint_positions: f64,
    pub torques: f64,
    pub joint_acc: f64,
    pub action_rate: f64,
    pub action_acc: f64,
    pub offset: f64,
    pub contact_clip: f64,
    pub t_blend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSettings {
    pub iterations: usize,
    pub envs: usize,
    pub steps: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub clip: f64,
    pub entropy_coeff: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub desired_kl: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub initial_log_std: f64,
    pub hidden: Vec<usize>,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosegenSettings {
    /// Total poses to generate before splitting.
    pub count: usize,
    /// Poses moved into the held-out test split.
    pub test_count: usize,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Paired trials per policy.
    pub trials: usize,
}

pub const PRESET_NAMES: [&str; 3] = ["paper", "desk", "smoke"];

impl Settings {
    /// Full-scale configuration. Training at this scale is a multi-day CPU
    /// run; it exists so the complete parameter set is on record.
    pub fn paper() -> Self {
        let sim = SimParams::default();
        let ranges = InitialStateRanges::default();
        let noise = NoiseParams::default();
        let reward = RewardWeights::default();
        let ppo = PpoConfig::default();
        let gen = GenParams::default();
        Settings {
            preset: "paper".to_string(),
            seed: 0,
            sim: SimSettings {
                gravity: sim.gravity,
                substeps: sim.substeps,
                contact_stiffness: sim.contact.stiffness,
                contact_damping: sim.contact.damping,
                contact_friction: sim.contact.friction,
            },
            episode: EpisodeSettings {
                horizon: 4.0,
                control_dt: 0.02,
                height_margin: 0.02,
                sample_attempts: 1000,
                disturbances: "standard".to_string(),
                roll_range: ranges.roll,
                pitch_range: ranges.pitch,
                joint_span: ranges.joint_span,
                lin_vel_range: ranges.lin_vel,
                ang_vel_range: ranges.ang_vel,
                joint_vel_range: ranges.joint_vel,
                noise_orientation: noise.orientation,
                noise_root_vel: noise.root_vel,
                noise_joints: noise.joints,
                noise_joint_vel: noise.joint_vel,
            },
            reward: RewardSettings {
                contact: reward.contact,
                root_acc: reward.root_acc,
                root_orientation: reward.root_orientation,
                joint_positions: reward.joint_positions,
                torques: reward.torques,
                joint_acc: reward.joint_acc,
                action_rate: reward.action_rate,
                action_acc: reward.action_acc,
                offset: reward.offset,
                contact_clip: reward.contact_clip,
                t_blend: reward.t_blend,
            },
            ppo: PpoSettings {
                iterations: ppo.iterations,
                envs: ppo.envs,
                steps: ppo.steps,
                minibatches: ppo.minibatches,
                epochs: ppo.epochs,
                clip: ppo.clip,
                entropy_coeff: ppo.entropy_coeff,
                gamma: ppo.gamma,
                lambda: ppo.lambda,
                desired_kl: ppo.desired_kl,
                max_grad_norm: ppo.max_grad_norm,
                learning_rate: ppo.learning_rate,
                initial_log_std: ppo.initial_log_std,
                hidden: ppo.hidden.clone(),
                checkpoint_every: ppo.checkpoint_every,
            },
            posegen: PosegenSettings {
                count: 26_000,
                test_count: 2_000,
                n_bins: gen.n_bins,
                balance_ratio: gen.balance_ratio,
                drop_height: gen.drop_height,
                frozen_gain: gen.frozen_gain,
                settle_max_time: gen.settle_max_time,
                lin_tol: gen.lin_tol,
                ang_tol: gen.ang_tol,
                hold_time: gen.hold_time,
                attempts_per_pose: gen.attempts_per_pose,
            },
            eval: EvalSettings { trials: 32_768 },
        }
    }

    /// Reduced scale for a desktop CPU: small networks, hundreds of
    /// environments, datasets in the hundreds of poses.
    pub fn desk() -> Self {
        let mut s = Self::paper();
        s.preset = "desk".to_string();
        s.ppo.iterations = 1_500;
        s.ppo.envs = 256;
        s.ppo.hidden = vec![128, 128];
        s.ppo.checkpoint_every = 100;
        s.posegen.count = 200;
        s.posegen.test_count = 40;
        s.eval.trials = 512;
        s
    }

    /// Minutes-scale gate meant for the pendulum model: tiny network,
    /// short episodes, no disturbances.
    pub fn smoke() -> Self {
        let mut s = Self::paper();
        s.preset = "smoke".to_string();
        s.episode.horizon = 1.0;
        s.episode.disturbances = "off".to_string();
        s.ppo.iterations = 40;
        s.ppo.envs = 64;
        s.ppo.steps = 16;
        s.ppo.minibatches = 2;
        s.ppo.epochs = 3;
        s.ppo.hidden = vec![32, 32];
        s.ppo.checkpoint_every = 10;
        s.posegen.count = 12;
        s.posegen.test_count = 4;
        s.eval.trials = 16;
        s
    }

    pub fn preset(name: &str) -> Result<Self, ToolError> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(ToolError::Usage(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// Applies a config file over these settings. Unknown or mistyped
    /// fields are data errors naming the offending key.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ToolError> {
        let overlay: toml::Value = text
            .parse()
            .map_err(|e| ToolError::Data(format!("config file: {e}")))?;
        let mut base = self.to_value();
        merge_value(&mut base, overlay);
        *self = base
            .try_into()
            .map_err(|e| ToolError::Data(format!("config file: {e}")))?;
        Ok(())
    }

    /// Applies one `--set key=value` override, e.g. `ppo.envs=128`.
    pub fn apply_set(&mut self, spec: &str) -> Result<(), ToolError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| ToolError::Usage(format!("--set {spec:?}: expected key=value")))?;
        let parsed: Result<toml::Value, _> = format!("v = {raw}").parse::<toml::Table>().map(
            |mut t| t.remove("v").expect("key v was just parsed"),
        );
        // Bare words like `standard` are not valid TOML values; treat them
        // as strings so string fields don't require shell-escaped quotes.
        let value = parsed.unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        let mut base = self.to_value();
        set_path(&mut base, key, value)
            .map_err(|why| ToolError::Usage(format!("--set {spec:?}: {why}")))?;
        *self = base
            .try_into()
            .map_err(|e| ToolError::Usage(format!("--set {spec:?}: {e}")))?;
        Ok(())
    }

    fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("settings serialize")
    }

    /// Canonical TOML of the fully resolved settings.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize")
    }

    pub fn hash(&self) -> String {
        content_hash(&self.to_toml_string())
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            gravity: self.sim.gravity,
            substeps: self.sim.substeps,
            contact: ContactParams {
                stiffness: self.sim.contact_stiffness,
                damping: self.sim.contact_damping,
                friction: self.sim.contact_friction,
            },
        }
    }

    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            contact: self.reward.contact,
            root_acc: self.reward.root_acc,
            root_orientation: self.reward.root_orientation,
            joint_positions: self.reward.joint_positions,
            torques: self.reward.torques,
            joint_acc: self.reward.joint_acc,
            action_rate: self.reward.action_rate,
            action_acc: self.reward.action_acc,
            offset: self.reward.offset,
            contact_clip: self.reward.contact_clip,
            t_blend: self.reward.t_blend,
        }
    }

    pub fn episode_config(&self, model: &RobotModel) -> Result<EpisodeConfig, ToolError> {
        let disturbances = match self.episode.disturbances.as_str() {
            "off" => DisturbanceConfig::none(),
            "standard" => standard_disturbances(model),
            other => {
                return Err(ToolError::Data(format!(
                    "episode.disturbances {other:?} (expected \"off\" or \"standard\")"
                )))
            }
        };
        Ok(EpisodeConfig {
            ranges: InitialStateRanges {
                roll: self.episode.roll_range,
                pitch: self.episode.pitch_range,
                joint_span: self.episode.joint_span,
                lin_vel: self.episode.lin_vel_range,
                ang_vel: self.episode.ang_vel_range,
                joint_vel: self.episode.joint_vel_range,
            },
            noise: NoiseParams {
                orientation: self.episode.noise_orientation,
                root_vel: self.episode.noise_root_vel,
                joints: self.episode.noise_joints,
                joint_vel: self.episode.noise_joint_vel,
            },
            disturbances,
            weights: self.reward_weights(),
            horizon: self.episode.horizon,
            control_dt: self.episode.control_dt,
            gain_scale: 1.0,
            training: true,
            height_margin: self.episode.height_margin,
            sample_attempts: self.episode.sample_attempts,
        })
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            iterations: self.ppo.iterations,
            envs: self.ppo.envs,
            steps: self.ppo.steps,
            minibatches: self.ppo.minibatches,
            epochs: self.ppo.epochs,
            clip: self.ppo.clip,
            entropy_coeff: self.ppo.entropy_coeff,
            gamma: self.ppo.gamma,
            lambda: self.ppo.lambda,
            desired_kl: self.ppo.desired_kl,
            max_grad_norm: self.ppo.max_grad_norm,
            learning_rate: self.ppo.learning_rate,
            initial_log_std: self.ppo.initial_log_std,
            hidden: self.ppo.hidden.clone(),
            checkpoint_every: self.ppo.checkpoint_every,
        }
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            n_bins: self.posegen.n_bins,
            balance_ratio: self.posegen.balance_ratio,
            drop_height: self.posegen.drop_height,
            frozen_gain: self.posegen.frozen_gain,
            settle_max_time: self.posegen.settle_max_time,
            lin_tol: self.posegen.lin_tol,
            ang_tol: self.posegen.ang_tol,
            hold_time: self.posegen.hold_time,
            attempts_per_pose: self.posegen.attempts_per_pose,
        }
    }
}

/// Sustained pushes on the root plus short bursts on every actuated leaf
/// body (hands, feet — bodies that drive no further link).
fn standard_disturbances(model: &RobotModel) -> DisturbanceConfig {
    let mut is_parent = vec![false; model.n_bodies()];
    for body in model.bodies() {
        if let Some(p) = body.parent {
            is_parent[p] = true;
        }
    }
    let leaves: Vec<usize> = model
        .bodies()
        .iter()
        .enumerate()
        .filter(|(i, b)| !is_parent[*i] && b.joint.is_some())
        .map(|(i, _)| i)
        .collect();
    let mut groups = vec![DisturbanceGroup::sustained(vec![0])];
    if !leaves.is_empty() {
        groups.push(DisturbanceGroup::burst(leaves));
    }
    DisturbanceConfig { groups }
}

fn merge_value(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base), toml::Value::Table(overlay)) => {
            for (key, value) in overlay {
                match base.get_mut(&key) {
                    Some(slot) => merge_value(slot, value),
                    None => {
                        // Keep unknown keys so deserialization reports them.
                        base.insert(key, value);
                    }
                }
            }
        }
        (base, overlay) => *base = overlay,
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), String> {
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, prefix) = parts.split_last().ok_or("empty key")?;
    let mut seen = String::new();
    for part in prefix {
        if !seen.is_empty() {
            seen.push('.');
        }
        seen.push_str(part);
        cursor = cursor
            .get_mut(part)
            .ok_or_else(|| format!("no such setting group {seen:?}"))?;
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| format!("{seen:?} is not a setting group"))?;
    if !table.contains_key(*last) {
        return Err(format!("no such setting {key:?}"));
    }
    table.insert(last.to_string(), value);
    Ok(())
}
