//! Proximal policy optimization with an asymmetric actor-critic.
//!
//! The actor maps (normalized) policy observations to mean joint-setpoint
//! offsets around the default pose and carries a state-independent learned
//! log standard deviation; the critic is a separate network over the
//! privileged observation. Both are plain multi-layer perceptrons with ELU
//! hidden activations, trained with the clipped surrogate objective,
//! generalized advantage estimation, and a learning rate that adapts toward
//! a target KL divergence.
//!
//! Everything here is deterministic given the seeds. Rollout collection is
//! organized so each environment slot consumes only its own rng streams,
//! which lets a driver run slots in parallel and still reproduce the
//! sequential result bit for bit. At every checkpoint boundary the trainer
//! re-derives those streams from the master seed and the iteration counter,
//! so a resumed run replays an uninterrupted one exactly without the
//! checkpoint having to carry environment internals.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::SimParams;
use crate::episode::{
    actor_dim, critic_dim, Environment, EpisodeConfig, EpisodeError, Observation,
};
use crate::model::RobotModel;
use crate::posegen::EndPose;
use crate::reward::RewardBreakdown;

/// Smallest learning rate the KL schedule will decay to.
pub const LR_MIN: f64 = 1e-6;
/// Largest learning rate the KL schedule will grow to. Without a ceiling the
/// multiplicative increases diverge once the policy stops moving.
pub const LR_MAX: f64 = 1e-2;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Added to variances and standard deviations before division.
const NORM_EPS: f64 = 1e-8;

/// Errors from network evaluation, batch assembly, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum PpoError {
    /// A configuration or checkpoint field is out of range.
    Config { reason: &'static str },
    /// Two lengths that must agree do not.
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A surrogate or value loss (or its gradient) stopped being finite.
    /// The update aborts before applying the offending minibatch.
    NonFiniteLoss {
        epoch: usize,
        minibatch: usize,
        policy_loss: f64,
        value_loss: f64,
    },
    /// An environment failed while collecting rollouts.
    Episode(EpisodeError),
}

impl fmt::Display for PpoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config { reason } => write!(f, "bad configuration: {reason}"),
            Self::Shape {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected {expected}, got {got}"),
            Self::NonFiniteLoss {
                epoch,
                minibatch,
                policy_loss,
                value_loss,
            } => write!(
                f,
                "non-finite loss at epoch {epoch}, minibatch {minibatch} \
                 (policy {policy_loss}, value {value_loss}); update aborted"
            ),
            Self::Episode(e) => write!(f, "episode failure during rollout: {e}"),
        }
    }
}

impl From<EpisodeError> for PpoError {
    fn from(e: EpisodeError) -> Self {
        Self::Episode(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PpoError {}

/// Training hyperparameters. The defaults are the full-scale settings;
/// presets for smaller machines shrink the counts and hidden sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    /// Optimizer iterations (one rollout collection + update each).
    pub iterations: usize,
    /// Parallel environment instances.
    pub envs: usize,
    /// Control steps collected per environment per iteration.
    pub steps: usize,
    /// Minibatches per epoch.
    pub minibatches: usize,
    /// Passes over the batch per update.
    pub epochs: usize,
    /// Clip range of the surrogate ratio.
    pub clip: f64,
    /// Entropy bonus coefficient.
    pub entropy_coeff: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Generalized-advantage-estimation factor.
    pub lambda: f64,
    /// KL divergence the learning-rate schedule steers toward.
    pub desired_kl: f64,
    /// Global gradient-norm clip, applied per network per minibatch.
    pub max_grad_norm: f64,
    /// Initial learning rate; adapted during training within
    /// [`LR_MIN`]..=[`LR_MAX`].
    pub learning_rate: f64,
    /// Initial log standard deviation of the action distribution.
    pub initial_log_std: f64,
    /// Hidden layer widths shared by actor and critic.
    pub hidden: Vec<usize>,
    /// Iterations between checkpoint boundaries. Environment streams are
    /// re-derived from the seed at every boundary, which is what makes a
    /// resumed run identical to an uninterrupted one.
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 75_000,
            envs: 4096,
            steps: 24,
            minibatches: 4,
            epochs: 5,
            clip: 0.2,
            entropy_coeff: 0.0,
            gamma: 0.99,
            lambda: 0.95,
            desired_kl: 0.01,
            max_grad_norm: 1.0,
            learning_rate: 1e-3,
            initial_log_std: 0.5f64.ln(),
            hidden: vec![512, 512, 512],
            checkpoint_every: 500,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let positive = [
            (self.iterations, "iterations must be positive"),
            (self.envs, "envs must be positive"),
            (self.steps, "steps must be positive"),
            (self.minibatches, "minibatches must be positive"),
            (self.epochs, "epochs must be positive"),
            (self.checkpoint_every, "checkpoint_every must be positive"),
        ];
        for (value, reason) in positive {
            if value == 0 {
                return Err(PpoError::Config { reason });
            }
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(PpoError::Config {
                reason: "clip must lie in (0, 1)",
            });
        }
        if !(self.entropy_coeff >= 0.0 && self.entropy_coeff.is_finite()) {
            return Err(PpoError::Config {
                reason: "entropy_coeff must be finite and non-negative",
            });
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(PpoError::Config {
                reason: "gamma must lie in [0, 1]",
            });
        }
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return Err(PpoError::Config {
                reason: "lambda must lie in [0, 1]",
            });
        }
        if !(self.desired_kl > 0.0 && self.desired_kl.is_finite()) {
            return Err(PpoError::Config {
                reason: "desired_kl must be finite and positive",
            });
        }
        if !(self.max_grad_norm > 0.0 && self.max_grad_norm.is_finite()) {
            return Err(PpoError::Config {
                reason: "max_grad_norm must be finite and positive",
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PpoError::Config {
                reason: "learning_rate must be finite and positive",
            });
        }
        if !self.initial_log_std.is_finite() {
            return Err(PpoError::Config {
                reason: "initial_log_std must be finite",
            });
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(PpoError::Config {
                reason: "hidden layer widths must be non-empty and positive",
            });
        }
        Ok(())
    }
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

fn elu_deriv(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Fully connected network with ELU hidden activations and a linear output
/// layer. Batches are stored one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    /// `weights[l]` maps layer `l` input to output: (fan_out x fan_in).
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Per-layer inputs and pre-activations saved by
/// [`MlpNet::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `inputs[l]` is the batch entering layer `l`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers (the output layer is linear).
    pre: Vec<DMatrix<f64>>,
}

/// Parameter gradients, shaped like the network they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// Sum of squared entries across all parameters.
    pub fn squared_norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|m| m.norm_squared()).sum();
        let b: f64 = self.biases.iter().map(|v| v.norm_squared()).sum();
        w + b
    }
}

impl MlpNet {
    /// Builds a network with the given layer sizes (input first, output
    /// last) and a documented deterministic initialization: weights are
    /// Xavier-uniform in `±sqrt(6 / (fan_in + fan_out))`, drawn column by
    /// column from `rng`, biases are zero, and the output layer is scaled
    /// by `final_scale` (policy heads use 0.1 so initial outputs sit near
    /// zero).
    pub fn new<R: Rng>(sizes: &[usize], final_scale: f64, rng: &mut R) -> Result<Self, PpoError> {
        if sizes.len() < 2 {
            return Err(PpoError::Config {
                reason: "a network needs at least an input and an output layer",
            });
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(PpoError::Config {
                reason: "layer sizes must be positive",
            });
        }
        if !(final_scale.is_finite() && final_scale > 0.0) {
            return Err(PpoError::Config {
                reason: "final_scale must be finite and positive",
            });
        }
        let n_layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l == n_layers - 1 { final_scale } else { 1.0 };
            let mut w = DMatrix::zeros(fan_out, fan_in);
            for j in 0..fan_in {
                for i in 0..fan_out {
                    w[(i, j)] = scale * rng.random_range(-limit..limit);
                }
            }
            weights.push(w);
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self { weights, biases })
    }

    /// Rebuilds a network from explicit parameters (checkpoint loading).
    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
    ) -> Result<Self, PpoError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(PpoError::Config {
                reason: "weights and biases must be non-empty and paired",
            });
        }
        for l in 0..weights.len() {
            if biases[l].len() != weights[l].nrows() {
                return Err(PpoError::Config {
                    reason: "bias length must match the weight row count",
                });
            }
            if l > 0 && weights[l].ncols() != weights[l - 1].nrows() {
                return Err(PpoError::Config {
                    reason: "consecutive layer sizes must chain",
                });
            }
        }
        let net = Self { weights, biases };
        if !net.is_finite() {
            return Err(PpoError::Config {
                reason: "network parameters must be finite",
            });
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("validated non-empty").nrows()
    }

    /// Layer sizes including input and output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.weights.iter().map(|w| w.nrows()));
        sizes
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Evaluates a single input.
    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>, PpoError> {
        let batch = DMatrix::from_column_slice(input.len(), 1, input.as_slice());
        let out = self.forward_batch(&batch)?;
        Ok(out.column(0).into_owned())
    }

    /// Evaluates a batch stored one sample per column.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>, PpoError> {
        let (out, _) = self.run(inputs, false)?;
        Ok(out)
    }

    /// Evaluates a batch and keeps the per-layer values needed by
    /// [`MlpNet::backward`].
    pub fn forward_cached(
        &self,
        inputs: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, MlpCache), PpoError> {
        let (out, cache) = self.run(inputs, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn run(
        &self,
        inputs: &DMatrix<f64>,
        keep_cache: bool,
    ) -> Result<(DMatrix<f64>, Option<MlpCache>), PpoError> {
        if inputs.nrows() != self.input_dim() {
            return Err(PpoError::Shape {
                what: "network input dimension",
                expected: self.input_dim(),
                got: inputs.nrows(),
            });
        }
        let n_layers = self.weights.len();
        let mut cache = keep_cache.then(|| MlpCache {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers.saturating_sub(1)),
        });
        let mut x = inputs.clone();
        for l in 0..n_layers {
            let mut z = &self.weights[l] * &x;
            for j in 0..z.ncols() {
                for i in 0..z.nrows() {
                    z[(i, j)] += self.biases[l][i];
                }
            }
            if let Some(c) = cache.as_mut() {
                c.inputs.push(x);
            }
            if l + 1 < n_layers {
                if let Some(c) = cache.as_mut() {
                    c.pre.push(z.clone());
                }
                x = z.map(elu);
            } else {
                x = z;
            }
        }
        Ok((x, cache))
    }

    /// Reverse-mode gradients of `sum(upstream .* output)` with respect to
    /// every parameter. `cache` must come from a forward pass of this
    /// network on the same batch.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &DMatrix<f64>,
    ) -> Result<MlpGrads, PpoError> {
        let n_layers = self.weights.len();
        if cache.inputs.len() != n_layers {
            return Err(PpoError::Shape {
                what: "cache layer count",
                expected: n_layers,
                got: cache.inputs.len(),
            });
        }
        if upstream.nrows() != self.output_dim() || upstream.ncols() != cache.inputs[0].ncols() {
            return Err(PpoError::Shape {
                what: "upstream gradient rows x batch",
                expected: self.output_dim() * cache.inputs[0].ncols(),
                got: upstream.nrows() * upstream.ncols(),
            });
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = upstream.clone();
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                let deriv = cache.pre[l].map(elu_deriv);
                g.component_mul_assign(&deriv);
            }
            grads.weights[l] = &g * cache.inputs[l].transpose();
            grads.biases[l] = g.column_sum();
            if l > 0 {
                g = self.weights[l].transpose() * &g;
            }
        }
        Ok(grads)
    }

    /// Copies all parameters into `out` (per layer: weight entries in
    /// column-major order, then the bias). The same order is used by
    /// [`MlpNet::read_flat`] and the optimizer state.
    fn write_flat(&self, out: &mut [f64], cursor: &mut usize) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for x in w.iter() {
                out[*cursor] = *x;
                *cursor += 1;
            }
            for x in b.iter() {
                out[*cursor] = *x;
                *cursor += 1;
            }
        }
    }

    fn read_flat(&mut self, src: &[f64], cursor: &mut usize) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = src[*cursor];
                *cursor += 1;
            }
            for x in b.iter_mut() {
                *x = src[*cursor];
                *cursor += 1;
            }
        }
    }
}

impl MlpGrads {
    fn write_flat(&self, out: &mut [f64], cursor: &mut usize) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for x in w.iter() {
                out[*cursor] = *x;
                *cursor += 1;
            }
            for x in b.iter() {
                out[*cursor] = *x;
                *cursor += 1;
            }
        }
    }
}

/// Adam optimizer moments over a flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }

    /// Rebuilds optimizer state from a checkpoint.
    pub fn from_parts(m: DVector<f64>, v: DVector<f64>, t: u64) -> Result<Self, PpoError> {
        if m.len() != v.len() {
            return Err(PpoError::Config {
                reason: "optimizer moment vectors must have equal length",
            });
        }
        if m.iter().any(|x| !x.is_finite()) || v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(PpoError::Config {
                reason: "optimizer moments must be finite (second moments non-negative)",
            });
        }
        Ok(Self { m, v, t })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam step in place.
    fn step(&mut self, params: &mut DVector<f64>, grads: &DVector<f64>, lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Per-channel running mean and variance (Welford), used to normalize
/// observations. Statistics update only while collecting training rollouts;
/// evaluation just applies them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    mean: DVector<f64>,
    /// Sum of squared deviations from the running mean.
    m2: DVector<f64>,
    count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
            count: 0.0,
        }
    }

    /// Rebuilds normalizer state from a checkpoint.
    pub fn from_parts(mean: DVector<f64>, m2: DVector<f64>, count: f64) -> Result<Self, PpoError> {
        if mean.len() != m2.len() {
            return Err(PpoError::Config {
                reason: "normalizer mean and m2 must have equal length",
            });
        }
        if !(count.is_finite() && count >= 0.0) {
            return Err(PpoError::Config {
                reason: "normalizer count must be finite and non-negative",
            });
        }
        if mean.iter().any(|x| !x.is_finite())
            || m2.iter().any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(PpoError::Config {
                reason: "normalizer statistics must be finite (m2 non-negative)",
            });
        }
        Ok(Self { mean, m2, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn m2(&self) -> &DVector<f64> {
        &self.m2
    }

    /// Population variance per channel (ones before any samples arrive).
    pub fn variance(&self) -> DVector<f64> {
        if self.count < 1.0 {
            return DVector::from_element(self.dim(), 1.0);
        }
        self.m2.map(|x| x / self.count)
    }

    /// Absorbs one sample.
    pub fn update(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1.0;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / self.count;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// Absorbs another accumulator (parallel merge). Merging slot
    /// accumulators in a fixed order keeps parallel collection
    /// deterministic.
    pub fn merge(&mut self, other: &RunningNorm) {
        debug_assert_eq!(self.dim(), other.dim());
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            self.mean.copy_from(&other.mean);
            self.m2.copy_from(&other.m2);
            self.count = other.count;
            return;
        }
        let total = self.count + other.count;
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / total;
            self.mean[i] += delta * other.count / total;
        }
        self.count = total;
    }

    /// Standardizes a sample with the current statistics.
    pub fn normalize(&self, x: &[f64]) -> Result<DVector<f64>, PpoError> {
        if x.len() != self.dim() {
            return Err(PpoError::Shape {
                what: "normalizer input length",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let var = self.variance();
        let mut out = DVector::zeros(x.len());
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / (var[i] + NORM_EPS).sqrt();
        }
        Ok(out)
    }
}

/// Generalized advantage estimation.
///
/// `values` carries one extra trailing entry: the bootstrap value of the
/// state after the last step (ignored when that step is terminal).
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let t_max = rewards.len();
    if values.len() != t_max + 1 {
        return Err(PpoError::Shape {
            what: "value count (needs one bootstrap entry)",
            expected: t_max + 1,
            got: values.len(),
        });
    }
    if terminals.len() != t_max {
        return Err(PpoError::Shape {
            what: "terminal flag count",
            expected: t_max,
            got: terminals.len(),
        });
    }
    let mut advantages = vec![0.0; t_max];
    let mut next_adv = 0.0;
    for t in (0..t_max).rev() {
        let carry = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * carry * values[t + 1] - values[t];
        next_adv = delta + gamma * lambda * carry * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, returns))
}

/// Diagonal-Gaussian policy: an MLP produces the mean, and a learned
/// state-independent log standard deviation sets the exploration noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: MlpNet,
    pub log_std: DVector<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        initial_log_std: f64,
        rng: &mut R,
    ) -> Result<Self, PpoError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        Ok(Self {
            net: MlpNet::new(&sizes, 0.1, rng)?,
            log_std: DVector::from_element(act_dim, initial_log_std),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.log_std.len()
    }

    /// Draws an action around `mean` using the current noise scale.
    pub fn sample<R: Rng>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mut action = mean.clone();
        for k in 0..action.len() {
            let z: f64 = rng.sample(StandardNormal);
            action[k] += self.log_std[k].exp() * z;
        }
        action
    }

    /// Log density of `action` under a Gaussian centered at `mean` with the
    /// policy's standard deviation.
    pub fn log_prob(&self, mean: &DVector<f64>, action: &DVector<f64>) -> f64 {
        gaussian_log_prob(mean, &self.log_std, action)
    }

    /// Differential entropy of the action distribution (state-independent).
    pub fn entropy(&self) -> f64 {
        let d = self.log_std.len() as f64;
        self.log_std.sum() + 0.5 * d * (1.0 + (2.0 * core::f64::consts::PI).ln())
    }
}

fn gaussian_log_prob(mean: &DVector<f64>, log_std: &DVector<f64>, action: &DVector<f64>) -> f64 {
    let mut lp = -0.5 * mean.len() as f64 * (2.0 * core::f64::consts::PI).ln();
    for k in 0..mean.len() {
        let z = (action[k] - mean[k]) / log_std[k].exp();
        lp += -0.5 * z * z - log_std[k];
    }
    lp
}

/// Closed-form KL divergence between two diagonal Gaussians,
/// `KL(old || new)`, summed over action dimensions.
pub fn gaussian_kl(
    mean_old: &DVector<f64>,
    log_std_old: &DVector<f64>,
    mean_new: &DVector<f64>,
    log_std_new: &DVector<f64>,
) -> f64 {
    let mut kl = 0.0;
    for k in 0..mean_old.len() {
        let var_old = (2.0 * log_std_old[k]).exp();
        let var_new = (2.0 * log_std_new[k]).exp();
        let diff = mean_old[k] - mean_new[k];
        kl += log_std_new[k] - log_std_old[k] + (var_old + diff * diff) / (2.0 * var_new) - 0.5;
    }
    kl
}

/// One environment's share of a rollout. Observations are stored already
/// normalized (with the statistics that were live during collection), one
/// sample per column; `values` has the bootstrap entry appended.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTrajectory {
    pub actor_obs: DMatrix<f64>,
    pub critic_obs: DMatrix<f64>,
    /// Sampled setpoint offsets (what the log-probabilities refer to).
    pub actions: DMatrix<f64>,
    /// Policy means at collection time, kept for the KL measurement.
    pub means: DMatrix<f64>,
    pub log_probs: DVector<f64>,
    pub rewards: DVector<f64>,
    pub values: DVector<f64>,
    pub terminals: Vec<bool>,
    /// `false` marks steps of episodes that hit an integration failure;
    /// those steps are excluded from the update.
    pub mask: Vec<bool>,
}

impl EnvTrajectory {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    fn validate(&self, obs_a: usize, obs_c: usize, act: usize) -> Result<(), PpoError> {
        let t_max = self.steps();
        let checks = [
            ("trajectory actor observation rows", self.actor_obs.nrows(), obs_a),
            ("trajectory critic observation rows", self.critic_obs.nrows(), obs_c),
            ("trajectory action rows", self.actions.nrows(), act),
            ("trajectory mean rows", self.means.nrows(), act),
            ("trajectory actor observation columns", self.actor_obs.ncols(), t_max),
            ("trajectory critic observation columns", self.critic_obs.ncols(), t_max),
            ("trajectory action columns", self.actions.ncols(), t_max),
            ("trajectory mean columns", self.means.ncols(), t_max),
            ("trajectory log-probability count", self.log_probs.len(), t_max),
            ("trajectory value count", self.values.len(), t_max + 1),
            ("trajectory terminal count", self.terminals.len(), t_max),
            ("trajectory mask count", self.mask.len(), t_max),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(PpoError::Shape {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Rollouts from every environment plus the behavior policy's noise scale
/// at collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<EnvTrajectory>,
    pub log_std: DVector<f64>,
}

impl RolloutBatch {
    pub fn validate(&self, obs_a: usize, obs_c: usize, act: usize) -> Result<(), PpoError> {
        if self.log_std.len() != act {
            return Err(PpoError::Shape {
                what: "batch log-std length",
                expected: act,
                got: self.log_std.len(),
            });
        }
        for traj in &self.trajectories {
            traj.validate(obs_a, obs_c, act)?;
        }
        Ok(())
    }

    /// Steps that survive the failure mask.
    pub fn kept_steps(&self) -> usize {
        self.trajectories
            .iter()
            .map(|t| t.mask.iter().filter(|&&m| m).count())
            .sum()
    }
}

/// Actor, critic, their optimizers, and the shared adaptive learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AcNets {
    pub actor: GaussianPolicy,
    pub critic: MlpNet,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub learning_rate: f64,
}

impl AcNets {
    /// Fresh networks and optimizers for the given dimensions, initialized
    /// deterministically from `rng` (actor first, then critic).
    pub fn new<R: Rng>(
        obs_actor: usize,
        obs_critic: usize,
        act: usize,
        config: &PpoConfig,
        rng: &mut R,
    ) -> Result<Self, PpoError> {
        let actor = GaussianPolicy::new(obs_actor, act, &config.hidden, config.initial_log_std, rng)?;
        let mut sizes = vec![obs_critic];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let critic = MlpNet::new(&sizes, 1.0, rng)?;
        let actor_opt = AdamState::new(actor.n_params());
        let critic_opt = AdamState::new(critic.n_params());
        Ok(Self {
            actor,
            critic,
            actor_opt,
            critic_opt,
            learning_rate: config.learning_rate,
        })
    }

    fn validate(&self) -> Result<(), PpoError> {
        if self.actor_opt.dim() != self.actor.n_params() {
            return Err(PpoError::Config {
                reason: "actor optimizer state does not match the actor parameter count",
            });
        }
        if self.critic_opt.dim() != self.critic.n_params() {
            return Err(PpoError::Config {
                reason: "critic optimizer state does not match the critic parameter count",
            });
        }
        if self.critic.output_dim() != 1 {
            return Err(PpoError::Config {
                reason: "the critic must output a single value",
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(PpoError::Config {
                reason: "learning rate must be finite and positive",
            });
        }
        Ok(())
    }
}

/// Aggregate statistics of one [`ppo_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Mean per-sample KL divergence from the behavior policy.
    pub kl: f64,
    /// Fraction of samples whose ratio left the clip band.
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Learning rate after the KL adaptation.
    pub learning_rate: f64,
    /// Samples that entered the update after masking.
    pub steps_used: usize,
}

impl UpdateStats {
    fn empty(learning_rate: f64) -> Self {
        Self {
            kl: 0.0,
            clip_fraction: 0.0,
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
            learning_rate,
            steps_used: 0,
        }
    }
}

/// Surrogate loss value and gradients for one minibatch.
struct PolicyEval {
    grads: MlpGrads,
    dlog_std: DVector<f64>,
    loss: f64,
    kl_sum: f64,
    clip_hits: usize,
}

/// Evaluates the clipped surrogate objective on one minibatch and returns
/// its gradients with respect to the actor parameters. Gradients flow only
/// through samples whose unclipped branch attains the minimum.
fn policy_minibatch(
    policy: &GaussianPolicy,
    old_log_std: &DVector<f64>,
    obs: &DMatrix<f64>,
    actions: &DMatrix<f64>,
    old_means: &DMatrix<f64>,
    old_log_probs: &DVector<f64>,
    advantages: &DVector<f64>,
    clip: f64,
    entropy_coeff: f64,
) -> Result<PolicyEval, PpoError> {
    let m = obs.ncols();
    let act = policy.act_dim();
    let (means, cache) = policy.net.forward_cached(obs)?;
    let mut upstream = DMatrix::zeros(act, m);
    let mut dlog_std = DVector::from_element(act, -entropy_coeff);
    let mut loss_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clip_hits = 0;
    for j in 0..m {
        let mean_new = means.column(j).into_owned();
        let mean_old = old_means.column(j).into_owned();
        let action = actions.column(j).into_owned();
        let logp_new = gaussian_log_prob(&mean_new, &policy.log_std, &action);
        let ratio = (logp_new - old_log_probs[j]).exp();
        let adv = advantages[j];
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        let surr = (ratio * adv).min(clipped * adv);
        loss_sum -= surr;
        if (ratio - 1.0).abs() > clip {
            clip_hits += 1;
        }
        kl_sum += gaussian_kl(&mean_old, old_log_std, &mean_new, &policy.log_std);
        if ratio * adv <= clipped * adv {
            let scale = -adv * ratio / m as f64;
            for k in 0..act {
                let sigma = policy.log_std[k].exp();
                let z = (action[k] - mean_new[k]) / sigma;
                upstream[(k, j)] = scale * z / sigma;
                dlog_std[k] += scale * (z * z - 1.0);
            }
        }
    }
    let loss = loss_sum / m as f64 - entropy_coeff * policy.entropy();
    let grads = policy.net.backward(&cache, &upstream)?;
    Ok(PolicyEval {
        grads,
        dlog_std,
        loss,
        kl_sum,
        clip_hits,
    })
}

/// Rescales a flattened gradient to the given global norm if it exceeds it.
/// Returns the pre-clip norm.
fn clip_grad_norm(flat: &mut DVector<f64>, max_norm: f64) -> f64 {
    let norm = flat.norm();
    if norm > max_norm {
        *flat *= max_norm / norm;
    }
    norm
}

fn flatten_actor_grads(grads: &MlpGrads, dlog_std: &DVector<f64>, out: &mut DVector<f64>) {
    let mut cursor = 0;
    grads.write_flat(out.as_mut_slice(), &mut cursor);
    for k in 0..dlog_std.len() {
        out[cursor] = dlog_std[k];
        cursor += 1;
    }
}

fn actor_to_flat(policy: &GaussianPolicy, out: &mut DVector<f64>) {
    let mut cursor = 0;
    policy.net.write_flat(out.as_mut_slice(), &mut cursor);
    for k in 0..policy.log_std.len() {
        out[cursor] = policy.log_std[k];
        cursor += 1;
    }
}

fn actor_from_flat(policy: &mut GaussianPolicy, src: &DVector<f64>) {
    let mut cursor = 0;
    policy.net.read_flat(src.as_slice(), &mut cursor);
    for k in 0..policy.log_std.len() {
        policy.log_std[k] = src[cursor];
        cursor += 1;
    }
}

/// One full optimization pass over a rollout batch: computes advantages,
/// normalizes them, then runs the configured epochs of clipped-surrogate
/// minibatch updates on the actor and squared-error updates on the critic.
///
/// After each epoch the learning rate moves toward the desired KL: it is
/// divided by 1.5 when the epoch's mean KL exceeds twice the target and
/// multiplied by 1.5 when it falls below half the target, clamped to
/// [`LR_MIN`]..=[`LR_MAX`]. A non-finite loss aborts the update before the
/// offending minibatch is applied and surfaces a diagnostic.
pub fn ppo_update<R: Rng>(
    nets: &mut AcNets,
    batch: &RolloutBatch,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    nets.validate()?;
    let obs_a = nets.actor.obs_dim();
    let obs_c = nets.critic.input_dim();
    let act = nets.actor.act_dim();
    batch.validate(obs_a, obs_c, act)?;

    // Flatten kept steps: advantages come from per-trajectory recursion.
    let mut cols: Vec<(usize, usize)> = Vec::new();
    let mut adv_all: Vec<f64> = Vec::new();
    let mut ret_all: Vec<f64> = Vec::new();
    for (e, traj) in batch.trajectories.iter().enumerate() {
        let (adv, ret) = gae(
            traj.rewards.as_slice(),
            traj.values.as_slice(),
            &traj.terminals,
            config.gamma,
            config.lambda,
        )?;
        for t in 0..traj.steps() {
            if traj.mask[t] {
                cols.push((e, t));
                adv_all.push(adv[t]);
                ret_all.push(ret[t]);
            }
        }
    }
    let n = cols.len();
    if n == 0 {
        return Ok(UpdateStats::empty(nets.learning_rate));
    }

    let gather = |per: &dyn Fn(&EnvTrajectory, usize, usize) -> f64, rows: usize| {
        DMatrix::from_fn(rows, n, |i, j| {
            let (e, t) = cols[j];
            per(&batch.trajectories[e], i, t)
        })
    };
    let actor_obs = gather(&|tr, i, t| tr.actor_obs[(i, t)], obs_a);
    let critic_obs = gather(&|tr, i, t| tr.critic_obs[(i, t)], obs_c);
    let actions = gather(&|tr, i, t| tr.actions[(i, t)], act);
    let old_means = gather(&|tr, i, t| tr.means[(i, t)], act);
    let old_log_probs =
        DVector::from_fn(n, |j, _| batch.trajectories[cols[j].0].log_probs[cols[j].1]);

    // Normalize advantages over the whole batch.
    let mut advantages = DVector::from_vec(adv_all);
    let returns = DVector::from_vec(ret_all);
    let adv_mean = advantages.mean();
    let adv_std = (advantages.map(|a| (a - adv_mean) * (a - adv_mean)).sum() / n as f64).sqrt();
    advantages.apply(|a| *a = (*a - adv_mean) / (adv_std + NORM_EPS));

    let old_log_std = batch.log_std.clone();
    let mut actor_params = DVector::zeros(nets.actor.n_params());
    let mut actor_grads_flat = DVector::zeros(nets.actor.n_params());
    let mut critic_params = DVector::zeros(nets.critic.n_params());
    let mut critic_grads_flat = DVector::zeros(nets.critic.n_params());

    let chunk = n.div_ceil(config.minibatches);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut kl_total = 0.0;
    let mut clip_total = 0usize;
    let mut policy_loss_sum = 0.0;
    let mut value_loss_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut minibatch_count = 0usize;

    for epoch in 0..config.epochs {
        indices.shuffle(rng);
        let mut epoch_kl_sum = 0.0;
        let mut epoch_samples = 0usize;
        for (mb, idx) in indices.chunks(chunk).enumerate() {
            let m = idx.len();
            let mb_obs = actor_obs.select_columns(idx.iter());
            let mb_cobs = critic_obs.select_columns(idx.iter());
            let mb_actions = actions.select_columns(idx.iter());
            let mb_old_means = old_means.select_columns(idx.iter());
            let mb_old_logp = DVector::from_fn(m, |j, _| old_log_probs[idx[j]]);
            let mb_adv = DVector::from_fn(m, |j, _| advantages[idx[j]]);
            let mb_ret = DVector::from_fn(m, |j, _| returns[idx[j]]);

            let eval = policy_minibatch(
                &nets.actor,
                &old_log_std,
                &mb_obs,
                &mb_actions,
                &mb_old_means,
                &mb_old_logp,
                &mb_adv,
                config.clip,
                config.entropy_coeff,
            )?;

            let (values, vcache) = nets.critic.forward_cached(&mb_cobs)?;
            let mut value_loss = 0.0;
            let mut v_upstream = DMatrix::zeros(1, m);
            for j in 0..m {
                let err = values[(0, j)] - mb_ret[j];
                value_loss += err * err / m as f64;
                v_upstream[(0, j)] = 2.0 * err / m as f64;
            }
            let critic_grads = nets.critic.backward(&vcache, &v_upstream)?;

            flatten_actor_grads(&eval.grads, &eval.dlog_std, &mut actor_grads_flat);
            let mut cursor = 0;
            critic_grads.write_flat(critic_grads_flat.as_mut_slice(), &mut cursor);
            let actor_norm = clip_grad_norm(&mut actor_grads_flat, config.max_grad_norm);
            let critic_norm = clip_grad_norm(&mut critic_grads_flat, config.max_grad_norm);
            if !(eval.loss.is_finite()
                && value_loss.is_finite()
                && actor_norm.is_finite()
                && critic_norm.is_finite())
            {
                return Err(PpoError::NonFiniteLoss {
                    epoch,
                    minibatch: mb,
                    policy_loss: eval.loss,
                    value_loss,
                });
            }

            actor_to_flat(&nets.actor, &mut actor_params);
            nets.actor_opt
                .step(&mut actor_params, &actor_grads_flat, nets.learning_rate);
            actor_from_flat(&mut nets.actor, &actor_params);
            cursor = 0;
            nets.critic.write_flat(critic_params.as_mut_slice(), &mut cursor);
            nets.critic_opt
                .step(&mut critic_params, &critic_grads_flat, nets.learning_rate);
            cursor = 0;
            nets.critic.read_flat(critic_params.as_slice(), &mut cursor);

            kl_total += eval.kl_sum;
            epoch_kl_sum += eval.kl_sum;
            epoch_samples += m;
            clip_total += eval.clip_hits;
            policy_loss_sum += eval.loss;
            value_loss_sum += value_loss;
            entropy_sum += nets.actor.entropy();
            minibatch_count += 1;
        }
        let epoch_kl = epoch_kl_sum / epoch_samples as f64;
        if epoch_kl > 2.0 * config.desired_kl {
            nets.learning_rate = (nets.learning_rate / 1.5).max(LR_MIN);
        } else if epoch_kl < 0.5 * config.desired_kl {
            nets.learning_rate = (nets.learning_rate * 1.5).min(LR_MAX);
        }
    }

    let samples_seen = (config.epochs * n) as f64;
    Ok(UpdateStats {
        kl: kl_total / samples_seen,
        clip_fraction: clip_total as f64 / samples_seen,
        policy_loss: policy_loss_sum / minibatch_count as f64,
        value_loss: value_loss_sum / minibatch_count as f64,
        entropy: entropy_sum / minibatch_count as f64,
        learning_rate: nets.learning_rate,
        steps_used: n,
    })
}

/// One environment plus the rng its actions are drawn from and the
/// observation waiting to be acted on. Slots are self-contained so a driver
/// may process them in parallel.
#[derive(Debug)]
pub struct EnvSlot {
    env: Environment,
    action_rng: ChaCha8Rng,
    last_obs: Observation,
    episode_return: f64,
}

/// Borrowed pieces a slot needs during collection. The context only reads
/// shared state, so any number of slots can use it concurrently.
#[derive(Debug, Clone, Copy)]
pub struct RolloutCtx<'a> {
    pub actor: &'a GaussianPolicy,
    pub critic: &'a MlpNet,
    pub actor_norm: &'a RunningNorm,
    pub critic_norm: &'a RunningNorm,
    /// Default joint setpoints; policy outputs are offsets from these.
    pub defaults: &'a [f64],
    /// Control steps to collect per slot.
    pub steps: usize,
}

/// Everything one slot contributes to an iteration: its trajectory,
/// episode bookkeeping, and raw-observation statistics to fold into the
/// running normalizers afterwards.
#[derive(Debug, Clone)]
pub struct SlotOutput {
    trajectory: EnvTrajectory,
    completed_returns: Vec<f64>,
    dropped_episodes: usize,
    reward_sums: RewardBreakdown,
    actor_acc: RunningNorm,
    critic_acc: RunningNorm,
}

fn add_breakdown(acc: &mut RewardBreakdown, x: &RewardBreakdown) {
    acc.contact += x.contact;
    acc.root_acc += x.root_acc;
    acc.root_orientation += x.root_orientation;
    acc.joint_positions += x.joint_positions;
    acc.torques += x.torques;
    acc.joint_acc += x.joint_acc;
    acc.action_rate += x.action_rate;
    acc.action_acc += x.action_acc;
    acc.offset += x.offset;
    acc.total += x.total;
}

fn scale_breakdown(acc: &mut RewardBreakdown, s: f64) {
    acc.contact *= s;
    acc.root_acc *= s;
    acc.root_orientation *= s;
    acc.joint_positions *= s;
    acc.torques *= s;
    acc.joint_acc *= s;
    acc.action_rate *= s;
    acc.action_acc *= s;
    acc.offset *= s;
    acc.total *= s;
}

/// Steps one slot for `ctx.steps` control steps, storing normalized
/// observations, sampled actions, values, and rewards. Episodes that end in
/// an integration failure have this rollout's share of their steps masked
/// out of the batch. Consumes only the slot's own rng streams, so results
/// do not depend on the order slots are processed in.
pub fn collect_slot(ctx: &RolloutCtx<'_>, slot: &mut EnvSlot) -> Result<SlotOutput, PpoError> {
    let steps = ctx.steps;
    let obs_a = ctx.actor.obs_dim();
    let obs_c = ctx.critic.input_dim();
    let act = ctx.actor.act_dim();
    let mut trajectory = EnvTrajectory {
        actor_obs: DMatrix::zeros(obs_a, steps),
        critic_obs: DMatrix::zeros(obs_c, steps),
        actions: DMatrix::zeros(act, steps),
        means: DMatrix::zeros(act, steps),
        log_probs: DVector::zeros(steps),
        rewards: DVector::zeros(steps),
        values: DVector::zeros(steps + 1),
        terminals: vec![false; steps],
        mask: vec![true; steps],
    };
    let mut actor_acc = RunningNorm::new(obs_a);
    let mut critic_acc = RunningNorm::new(obs_c);
    let mut completed_returns = Vec::new();
    let mut dropped_episodes = 0;
    let mut reward_sums = RewardBreakdown::default();
    let mut episode_start = 0usize;

    for t in 0..steps {
        actor_acc.update(&slot.last_obs.actor);
        critic_acc.update(&slot.last_obs.critic);
        let na = ctx.actor_norm.normalize(&slot.last_obs.actor)?;
        let nc = ctx.critic_norm.normalize(&slot.last_obs.critic)?;
        let mean = ctx.actor.net.forward(&na)?;
        let delta = ctx.actor.sample(&mean, &mut slot.action_rng);
        let log_prob = ctx.actor.log_prob(&mean, &delta);
        let value = ctx.critic.forward(&nc)?[0];
        let env_action: Vec<f64> = ctx
            .defaults
            .iter()
            .zip(delta.iter())
            .map(|(d, x)| d + x)
            .collect();
        let outcome = slot.env.step(&env_action)?;

        trajectory.actor_obs.set_column(t, &na);
        trajectory.critic_obs.set_column(t, &nc);
        trajectory.actions.set_column(t, &delta);
        trajectory.means.set_column(t, &mean);
        trajectory.log_probs[t] = log_prob;
        trajectory.values[t] = value;
        trajectory.rewards[t] = outcome.reward.total;
        trajectory.terminals[t] = outcome.done;
        add_breakdown(&mut reward_sums, &outcome.reward);
        slot.episode_return += outcome.reward.total;

        if outcome.done {
            if outcome.failed {
                for i in episode_start..=t {
                    trajectory.mask[i] = false;
                }
                dropped_episodes += 1;
            } else {
                completed_returns.push(slot.episode_return);
            }
            slot.episode_return = 0.0;
            slot.last_obs = slot.env.reset()?;
            episode_start = t + 1;
        } else {
            slot.last_obs = outcome.observation;
        }
    }
    let nc = ctx.critic_norm.normalize(&slot.last_obs.critic)?;
    trajectory.values[steps] = ctx.critic.forward(&nc)?[0];

    Ok(SlotOutput {
        trajectory,
        completed_returns,
        dropped_episodes,
        reward_sums,
        actor_acc,
        critic_acc,
    })
}

/// Everything needed to restart training: a checkpoint taken at one of the
/// trainer's boundaries resumes bit-for-bit. Environment internals are
/// deliberately absent; boundaries re-derive them from `seed` and
/// `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub seed: u64,
    pub actor: GaussianPolicy,
    pub critic: MlpNet,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub actor_norm: RunningNorm,
    pub critic_norm: RunningNorm,
    pub learning_rate: f64,
}

/// Per-iteration log record.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    /// Iteration index this record belongs to (0-based).
    pub iteration: usize,
    pub steps_collected: usize,
    /// Steps that survived the failure mask and entered the update.
    pub steps_kept: usize,
    pub episodes_completed: usize,
    pub episodes_dropped: usize,
    /// Mean total reward per collected step.
    pub mean_step_reward: f64,
    /// Mean return of episodes that finished this iteration, if any did.
    pub mean_episode_return: Option<f64>,
    /// Per-step means of every reward term.
    pub reward_means: RewardBreakdown,
    pub update: UpdateStats,
}

// Stream labels for deriving independent rng seeds from the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_ACTION: u64 = 3;
const STREAM_UPDATE: u64 = 4;

/// Mixes `(seed, stream, iteration, index)` into one rng seed
/// (splitmix64-style finalizers, so nearby inputs give unrelated streams).
pub(crate) fn derive_seed(seed: u64, stream: u64, iteration: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed.wrapping_add(mix(stream.wrapping_add(mix(
        iteration.wrapping_add(mix(index)),
    )))))
}

/// Drives rollout collection and updates over a bank of environments.
///
/// Call [`Trainer::step_iteration`] in a loop, or use [`train`] to run to
/// completion. A driver that wants to parallelize collection can instead
/// call [`Trainer::begin_iteration`], fan [`collect_slot`] out over
/// [`Trainer::split_for_rollout`], and hand the outputs (in slot order) to
/// [`Trainer::finish_iteration`]; the result is identical to the
/// sequential path.
#[derive(Debug)]
pub struct Trainer {
    model: RobotModel,
    config: PpoConfig,
    seed: u64,
    nets: AcNets,
    actor_norm: RunningNorm,
    critic_norm: RunningNorm,
    slots: Vec<EnvSlot>,
    defaults: Vec<f64>,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        model: RobotModel,
        sim: SimParams,
        episode: EpisodeConfig,
        goals: Vec<EndPose>,
        config: PpoConfig,
        seed: u64,
    ) -> Result<Self, PpoError> {
        config.validate()?;
        let obs_a = actor_dim(model.n_joints());
        let obs_c = critic_dim(model.n_joints(), model.n_bodies());
        let act = model.n_joints();
        if act == 0 {
            return Err(PpoError::Config {
                reason: "training needs at least one articulated joint",
            });
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 0, 0));
        let nets = AcNets::new(obs_a, obs_c, act, &config, &mut init_rng)?;
        Self::assemble(
            model,
            sim,
            episode,
            goals,
            config,
            seed,
            nets,
            RunningNorm::new(obs_a),
            RunningNorm::new(obs_c),
            0,
        )
    }

    /// Rebuilds a trainer from a checkpoint. The checkpoint must have been
    /// taken at a boundary (`iteration` divisible by `checkpoint_every`);
    /// resuming elsewhere could not reproduce the uninterrupted run, so it
    /// is rejected.
    pub fn resume(
        model: RobotModel,
        sim: SimParams,
        episode: EpisodeConfig,
        goals: Vec<EndPose>,
        config: PpoConfig,
        state: TrainState,
    ) -> Result<Self, PpoError> {
        config.validate()?;
        if state.iteration % config.checkpoint_every != 0 {
            return Err(PpoError::Config {
                reason: "checkpoint iteration is not a checkpoint boundary",
            });
        }
        let obs_a = actor_dim(model.n_joints());
        let obs_c = critic_dim(model.n_joints(), model.n_bodies());
        if state.actor.obs_dim() != obs_a
            || state.actor.act_dim() != model.n_joints()
            || state.critic.input_dim() != obs_c
            || state.actor_norm.dim() != obs_a
            || state.critic_norm.dim() != obs_c
        {
            return Err(PpoError::Config {
                reason: "checkpoint dimensions do not match the model",
            });
        }
        let nets = AcNets {
            actor: state.actor,
            critic: state.critic,
            actor_opt: state.actor_opt,
            critic_opt: state.critic_opt,
            learning_rate: state.learning_rate,
        };
        nets.validate()?;
        Self::assemble(
            model,
            sim,
            episode,
            goals,
            config,
            state.seed,
            nets,
            state.actor_norm,
            state.critic_norm,
            state.iteration,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: RobotModel,
        sim: SimParams,
        episode: EpisodeConfig,
        goals: Vec<EndPose>,
        config: PpoConfig,
        seed: u64,
        nets: AcNets,
        actor_norm: RunningNorm,
        critic_norm: RunningNorm,
        iteration: usize,
    ) -> Result<Self, PpoError> {
        let defaults = model.default_setpoints();
        let mut slots = Vec::with_capacity(config.envs);
        for _ in 0..config.envs {
            // The constructor seed is irrelevant: every stream is re-derived
            // at the first boundary before any episode starts.
            let env = Environment::new(model.clone(), sim, episode.clone(), goals.clone(), 0)?;
            slots.push(EnvSlot {
                env,
                action_rng: ChaCha8Rng::seed_from_u64(0),
                last_obs: Observation {
                    actor: Vec::new(),
                    critic: Vec::new(),
                },
                episode_return: 0.0,
            });
        }
        Ok(Self {
            model,
            config,
            seed,
            nets,
            actor_norm,
            critic_norm,
            slots,
            defaults,
            iteration,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn nets(&self) -> &AcNets {
        &self.nets
    }

    pub fn actor_norm(&self) -> &RunningNorm {
        &self.actor_norm
    }

    pub fn critic_norm(&self) -> &RunningNorm {
        &self.critic_norm
    }

    /// True when the trainer sits at a boundary where a checkpoint can be
    /// resumed exactly.
    pub fn at_checkpoint_boundary(&self) -> bool {
        self.iteration % self.config.checkpoint_every == 0
    }

    /// Snapshot of everything a resumed run needs. Exact replay requires
    /// taking it at a boundary; see [`Trainer::resume`].
    pub fn checkpoint(&self) -> TrainState {
        TrainState {
            iteration: self.iteration,
            seed: self.seed,
            actor: self.nets.actor.clone(),
            critic: self.nets.critic.clone(),
            actor_opt: self.nets.actor_opt.clone(),
            critic_opt: self.nets.critic_opt.clone(),
            actor_norm: self.actor_norm.clone(),
            critic_norm: self.critic_norm.clone(),
            learning_rate: self.nets.learning_rate,
        }
    }

    /// Starts an iteration. At checkpoint boundaries every slot's rng
    /// streams are re-derived from the master seed and the iteration
    /// counter and its environment resets, which pins the whole remaining
    /// run to `(seed, iteration)`.
    pub fn begin_iteration(&mut self) -> Result<(), PpoError> {
        if self.at_checkpoint_boundary() {
            let it = self.iteration as u64;
            for (i, slot) in self.slots.iter_mut().enumerate() {
                slot.env
                    .reseed(derive_seed(self.seed, STREAM_ENV, it, i as u64));
                slot.action_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    STREAM_ACTION,
                    it,
                    i as u64,
                ));
                slot.last_obs = slot.env.reset()?;
                slot.episode_return = 0.0;
            }
        }
        Ok(())
    }

    /// Splits the trainer into the shared read-only collection context and
    /// the mutable slots, for drivers that fan [`collect_slot`] out over a
    /// thread pool.
    pub fn split_for_rollout(&mut self) -> (RolloutCtx<'_>, &mut [EnvSlot]) {
        (
            RolloutCtx {
                actor: &self.nets.actor,
                critic: &self.nets.critic,
                actor_norm: &self.actor_norm,
                critic_norm: &self.critic_norm,
                defaults: &self.defaults,
                steps: self.config.steps,
            },
            &mut self.slots,
        )
    }

    /// Folds slot outputs (in slot order) into the normalizers, assembles
    /// the batch, and runs the update. The batch keeps the observations as
    /// normalized during collection, so absorbing the new statistics first
    /// does not perturb the update.
    pub fn finish_iteration(
        &mut self,
        outputs: Vec<SlotOutput>,
    ) -> Result<IterationStats, PpoError> {
        if outputs.len() != self.slots.len() {
            return Err(PpoError::Shape {
                what: "slot output count",
                expected: self.slots.len(),
                got: outputs.len(),
            });
        }
        let mut trajectories = Vec::with_capacity(outputs.len());
        let mut episodes_completed = 0;
        let mut episodes_dropped = 0;
        let mut return_sum = 0.0;
        let mut reward_means = RewardBreakdown::default();
        let mut steps_collected = 0;
        for out in outputs {
            self.actor_norm.merge(&out.actor_acc);
            self.critic_norm.merge(&out.critic_acc);
            episodes_completed += out.completed_returns.len();
            episodes_dropped += out.dropped_episodes;
            return_sum += out.completed_returns.iter().sum::<f64>();
            add_breakdown(&mut reward_means, &out.reward_sums);
            steps_collected += out.trajectory.steps();
            trajectories.push(out.trajectory);
        }
        let mean_step_reward = reward_means.total / steps_collected.max(1) as f64;
        scale_breakdown(&mut reward_means, 1.0 / steps_collected.max(1) as f64);
        let batch = RolloutBatch {
            trajectories,
            log_std: self.nets.actor.log_std.clone(),
        };
        let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            STREAM_UPDATE,
            self.iteration as u64,
            0,
        ));
        let update = ppo_update(&mut self.nets, &batch, &self.config, &mut update_rng)?;
        let stats = IterationStats {
            iteration: self.iteration,
            steps_collected,
            steps_kept: update.steps_used,
            episodes_completed,
            episodes_dropped,
            mean_step_reward,
            mean_episode_return: (episodes_completed > 0)
                .then(|| return_sum / episodes_completed as f64),
            reward_means,
            update,
        };
        self.iteration += 1;
        Ok(stats)
    }

    /// One rollout-and-update iteration, sequentially over the slots.
    pub fn step_iteration(&mut self) -> Result<IterationStats, PpoError> {
        self.begin_iteration()?;
        let (ctx, slots) = (
            RolloutCtx {
                actor: &self.nets.actor,
                critic: &self.nets.critic,
                actor_norm: &self.actor_norm,
                critic_norm: &self.critic_norm,
                defaults: &self.defaults,
                steps: self.config.steps,
            },
            &mut self.slots,
        );
        let mut outputs = Vec::with_capacity(slots.len());
        for slot in slots.iter_mut() {
            outputs.push(collect_slot(&ctx, slot)?);
        }
        self.finish_iteration(outputs)
    }
}

/// Runs training to the configured iteration count, invoking `on_iteration`
/// after every iteration, and returns the final state.
pub fn train<F: FnMut(&IterationStats)>(
    model: RobotModel,
    sim: SimParams,
    episode: EpisodeConfig,
    goals: Vec<EndPose>,
    config: PpoConfig,
    seed: u64,
    mut on_iteration: F,
) -> Result<TrainState, PpoError> {
    let mut trainer = Trainer::new(model, sim, episode, goals, config, seed)?;
    while trainer.iteration() < trainer.config().iterations {
        let stats = trainer.step_iteration()?;
        on_iteration(&stats);
    }
    Ok(trainer.checkpoint())
}
