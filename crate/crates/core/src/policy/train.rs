//! REINFORCE training over rollout trajectories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{pg_loss, PgExample, PolicyNet};
use super::{returns, Trajectory};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Entropy regularization weight.
    pub lambda: f64,
    /// Discount factor for recomputing returns from step rewards.
    pub gamma: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.2,
            lambda: 0.1,
            gamma: 0.1,
            seed: 17,
            batch_size: 32,
        }
    }
}

/// Gradient descent on the policy-gradient-with-entropy loss over shuffled
/// mini-batches of steps. Deterministic under `config.seed`; returns the
/// updated network and the per-epoch mean batch loss.
pub fn train_policy(
    net: &PolicyNet,
    trajectories: &[Trajectory],
    config: &PolicyTrainConfig,
) -> Result<(PolicyNet, Vec<f64>)> {
    if trajectories.is_empty() {
        return Err(Error::InsufficientData(
            "no trajectories to train on".into(),
        ));
    }
    let mut examples = Vec::new();
    for trajectory in trajectories {
        let rewards: Vec<f64> = trajectory.steps.iter().map(|s| s.reward).collect();
        let gs = returns(&rewards, config.gamma);
        for (step, g) in trajectory.steps.iter().zip(gs) {
            examples.push(PgExample {
                features: step.state.features,
                action: step.action,
                ret: g,
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::InsufficientData(
            "trajectories contain no steps".into(),
        ));
    }

    let mut trained = net.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(config.seed, epoch as u64, 0));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let batch: Vec<PgExample> = chunk.iter().map(|&i| examples[i]).collect();
            let mask_seed = seeds::derive2(config.seed, 1 + epoch as u64, batch_idx as u64);
            let (loss, grads) = pg_loss(&trained, &batch, config.lambda, mask_seed)?;
            trained.apply_update(&grads, config.learning_rate);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((trained, trace))
}
