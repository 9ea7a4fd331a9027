//! Core algorithms for training and evaluating controlled-fall policies on
//! articulated floating-base robots.
//!
//! The crate is `no_std`-compatible (with `alloc`) and contains no IO: robot
//! models, the reduced-coordinate simulator, reward shaping, end-pose
//! sampling, the training environment, PPO, and evaluation metrics are all
//! pure computation over in-memory data. File formats, configuration, and the
//! command-line tools live in the companion `softfall` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dynamics;
pub mod episode;
pub mod eval;
pub mod frames;
pub mod model;
pub mod posegen;
pub mod ppo;
pub mod reward;
mod spatial;

#[cfg(test)]
pub(crate) mod testutil;

pub use model::{Pose, RobotModel};
