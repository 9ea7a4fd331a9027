//! Training checkpoints and the per-iteration training log.
//!
//! A checkpoint is pretty-printed JSON holding exactly what
//! [`TrainState`] carries — parameters, optimizer moments, normalizer
//! statistics, learning rate, iteration, and seed — plus the hashes of the
//! resolved configuration, the model, and the training pose file. Floats
//! are stored in shortest round-trip decimal form, so a saved and reloaded
//! state is bit-identical and a resumed run replays the uninterrupted one.
//!
//! The training log is JSON Lines: one self-contained record per
//! iteration, append-friendly and safe to tail while a run is live.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use softfall_core::ppo::{AdamState, GaussianPolicy, IterationStats, MlpNet, RunningNorm, TrainState};

use crate::{content_hash, read_to_string, write_file, ToolError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_KIND: &str = "softfall-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub rows: usize,
    pub cols: usize,
    /// Weight matrix in column-major order.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetEntry {
    pub layers: Vec<LayerEntry>,
}

impl NetEntry {
    fn from_net(net: &MlpNet) -> Self {
        let layers = net
            .weights()
            .iter()
            .zip(net.biases())
            .map(|(w, b)| LayerEntry {
                rows: w.nrows(),
                cols: w.ncols(),
                weights: w.as_slice().to_vec(),
                bias: b.as_slice().to_vec(),
            })
            .collect();
        NetEntry { layers }
    }

    fn to_net(&self) -> Result<MlpNet, ToolError> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.rows * layer.cols {
                return Err(ToolError::Data(format!(
                    "layer {l}: {} weights for a {}x{} matrix",
                    layer.weights.len(),
                    layer.rows,
                    layer.cols
                )));
            }
            weights.push(DMatrix::from_column_slice(
                layer.rows,
                layer.cols,
                &layer.weights,
            ));
            biases.push(DVector::from_column_slice(&layer.bias));
        }
        MlpNet::from_parts(weights, biases)
            .map_err(|e| ToolError::Data(format!("invalid network: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamEntry {
    fn from_state(state: &AdamState) -> Self {
        let (m, v) = state.moments();
        AdamEntry {
            m: m.as_slice().to_vec(),
            v: v.as_slice().to_vec(),
            t: state.step_count(),
        }
    }

    fn to_state(&self) -> Result<AdamState, ToolError> {
        AdamState::from_parts(
            DVector::from_column_slice(&self.m),
            DVector::from_column_slice(&self.v),
            self.t,
        )
        .map_err(|e| ToolError::Data(format!("invalid optimizer state: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: f64,
}

impl NormEntry {
    fn from_norm(norm: &RunningNorm) -> Self {
        NormEntry {
            mean: norm.mean().as_slice().to_vec(),
            m2: norm.m2().as_slice().to_vec(),
            count: norm.count(),
        }
    }

    fn to_norm(&self) -> Result<RunningNorm, ToolError> {
        RunningNorm::from_parts(
            DVector::from_column_slice(&self.mean),
            DVector::from_column_slice(&self.m2),
            self.count,
        )
        .map_err(|e| ToolError::Data(format!("invalid normalizer state: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub version: u32,
    pub kind: String,
    /// Hash of the resolved settings the run was started with.
    pub config_hash: String,
    pub model_hash: String,
    /// Hash of the training pose file; evaluation refuses to reuse it.
    pub poses_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub learning_rate: f64,
    pub log_std: Vec<f64>,
    pub actor: NetEntry,
    pub critic: NetEntry,
    pub actor_opt: AdamEntry,
    pub critic_opt: AdamEntry,
    pub actor_norm: NormEntry,
    pub critic_norm: NormEntry,
}

impl CheckpointFile {
    pub fn from_state(
        state: &TrainState,
        config_hash: &str,
        model_hash: &str,
        poses_hash: &str,
    ) -> Self {
        CheckpointFile {
            version: CHECKPOINT_FORMAT_VERSION,
            kind: CHECKPOINT_KIND.to_string(),
            config_hash: config_hash.to_string(),
            model_hash: model_hash.to_string(),
            poses_hash: poses_hash.to_string(),
            seed: state.seed,
            iteration: state.iteration,
            learning_rate: state.learning_rate,
            log_std: state.actor.log_std.as_slice().to_vec(),
            actor: NetEntry::from_net(&state.actor.net),
            critic: NetEntry::from_net(&state.critic),
            actor_opt: AdamEntry::from_state(&state.actor_opt),
            critic_opt: AdamEntry::from_state(&state.critic_opt),
            actor_norm: NormEntry::from_norm(&state.actor_norm),
            critic_norm: NormEntry::from_norm(&state.critic_norm),
        }
    }

    pub fn to_state(&self) -> Result<TrainState, ToolError> {
        if self.version != CHECKPOINT_FORMAT_VERSION {
            return Err(ToolError::Data(format!(
                "checkpoint format version {} (this build reads {CHECKPOINT_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.kind != CHECKPOINT_KIND {
            return Err(ToolError::Data(format!(
                "not a checkpoint (kind {:?})",
                self.kind
            )));
        }
        let actor_net = self.actor.to_net()?;
        if self.log_std.len() != actor_net.output_dim() {
            return Err(ToolError::Data(format!(
                "{} log-std entries for {} actions",
                self.log_std.len(),
                actor_net.output_dim()
            )));
        }
        Ok(TrainState {
            iteration: self.iteration,
            seed: self.seed,
            actor: GaussianPolicy {
                net: actor_net,
                log_std: DVector::from_column_slice(&self.log_std),
            },
            critic: self.critic.to_net()?,
            actor_opt: self.actor_opt.to_state()?,
            critic_opt: self.critic_opt.to_state()?,
            actor_norm: self.actor_norm.to_norm()?,
            critic_norm: self.critic_norm.to_norm()?,
            learning_rate: self.learning_rate,
        })
    }

    pub fn to_canonical_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("checkpoints serialize");
        text.push('\n');
        text
    }

    pub fn hash(&self) -> String {
        content_hash(&self.to_canonical_string())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile, ToolError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ToolError::data_in(path, e))
}

pub fn save_checkpoint(path: &Path, file: &CheckpointFile) -> Result<(), ToolError> {
    write_file(path, &file.to_canonical_string())
}

/// One line of the training log. Everything is flattened so the file is
/// directly loadable by dataframe tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub steps_collected: usize,
    pub steps_kept: usize,
    pub episodes_completed: usize,
    pub episodes_dropped: usize,
    pub mean_step_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_episode_return: Option<f64>,
    pub reward_contact: f64,
    pub reward_root_acc: f64,
    pub reward_root_orientation: f64,
    pub reward_joint_positions: f64,
    pub reward_torques: f64,
    pub reward_joint_acc: f64,
    pub reward_action_rate: f64,
    pub reward_action_acc: f64,
    pub reward_offset: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub learning_rate: f64,
}

impl LogRecord {
    pub fn from_stats(stats: &IterationStats) -> Self {
        let r = &stats.reward_means;
        LogRecord {
            iteration: stats.iteration,
            steps_collected: stats.steps_collected,
            steps_kept: stats.steps_kept,
            episodes_completed: stats.episodes_completed,
            episodes_dropped: stats.episodes_dropped,
            mean_step_reward: stats.mean_step_reward,
            mean_episode_return: stats.mean_episode_return,
            reward_contact: r.contact,
            reward_root_acc: r.root_acc,
            reward_root_orientation: r.root_orientation,
            reward_joint_positions: r.joint_positions,
            reward_torques: r.torques,
            reward_joint_acc: r.joint_acc,
            reward_action_rate: r.action_rate,
            reward_action_acc: r.action_acc,
            reward_offset: r.offset,
            kl: stats.update.kl,
            clip_fraction: stats.update.clip_fraction,
            policy_loss: stats.update.policy_loss,
            value_loss: stats.update.value_loss,
            entropy: stats.update.entropy,
            learning_rate: stats.update.learning_rate,
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("log records serialize");
        line.push('\n');
        line
    }
}

/// Parses a training log back into records, skipping blank lines.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, ToolError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ToolError::Data(format!("training log: {e}"))))
        .collect()
}
