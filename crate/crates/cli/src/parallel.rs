//! Thread-pool drivers for training rollouts and evaluation trials.
//!
//! Both are shaped so that parallel execution is bit-identical to the
//! sequential engine paths: rollout slots and trial indices each own rng
//! streams derived from the master seed, workers never share mutable
//! state, and results merge in index order. Thread count and scheduling
//! therefore cannot change any number in an artifact.

use rayon::prelude::*;

use softfall_core::dynamics::SimParams;
use softfall_core::episode::EpisodeConfig;
use softfall_core::eval::{run_trial_block, EvalError, EvalReport, RolloutPolicy};
use softfall_core::model::RobotModel;
use softfall_core::posegen::EndPose;
use softfall_core::ppo::{collect_slot, IterationStats, PpoError, Trainer};

/// Trials per evaluation work unit. Small enough to balance load across
/// cores, large enough that per-block environment setup stays negligible.
pub const TRIAL_BLOCK: usize = 16;

/// One training iteration with the rollout fanned out over the thread
/// pool. Equivalent to [`Trainer::step_iteration`], which collects the
/// slots one after another.
pub fn train_iteration(trainer: &mut Trainer) -> Result<IterationStats, PpoError> {
    trainer.begin_iteration()?;
    let outputs = {
        let (ctx, slots) = trainer.split_for_rollout();
        slots
            .par_iter_mut()
            .map(|slot| collect_slot(&ctx, slot))
            .collect::<Result<Vec<_>, _>>()?
    };
    trainer.finish_iteration(outputs)
}

/// Evaluation over the thread pool: the trial stream is cut into
/// fixed-size blocks, each block runs on its own environment, and the
/// reports concatenate in index order. Equivalent to
/// [`softfall_core::eval::run_trials`].
#[allow(clippy::too_many_arguments)]
pub fn run_trials_parallel(
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
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(TRIAL_BLOCK)
        .map(|first| (first, TRIAL_BLOCK.min(n - first)))
        .collect();
    let reports = blocks
        .par_iter()
        .map(|&(first, count)| {
            run_trial_block(policy, model, sim, episode, goals, first, count, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut trials = Vec::with_capacity(n);
    let mut failures = 0;
    for report in reports {
        trials.extend(report.trials);
        failures += report.failures;
    }
    Ok(EvalReport {
        trials,
        failures,
        requested: n,
        seed,
    })
}
