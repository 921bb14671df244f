//! Greedy-episode statistics shared by the oracle and the learners.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvState, GridConfig, NUM_MOVES, NUM_SPIDERS, SUCCESS_HORIZON};
use crate::error::Result;
use crate::mmdp::ActionId;

/// Spider-indexed joint actions for a batch of states.
pub trait BatchPolicy {
    fn act_batch(
        &self,
        states: &[EnvState],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<[ActionId; NUM_SPIDERS]>>;
}

/// Uniformly random spiders.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl BatchPolicy for RandomPolicy {
    fn act_batch(
        &self,
        states: &[EnvState],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<[ActionId; NUM_SPIDERS]>> {
        Ok(states
            .iter()
            .map(|_| [rng.gen_range(0..NUM_MOVES), rng.gen_range(0..NUM_MOVES)])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    /// Mean episode length; uncaught episodes count as `max_steps`.
    pub mean_steps: f64,
    pub std_steps: f64,
    /// Fraction caught within [`SUCCESS_HORIZON`] steps.
    pub success_rate_10: f64,
}

/// Plays `episodes` episodes from uniform legal starts, `lanes` at a time.
pub fn run_episodes<P: BatchPolicy + ?Sized>(
    cfg: &GridConfig,
    policy: &P,
    episodes: usize,
    lanes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeStats> {
    let mut lengths = Vec::with_capacity(episodes);
    let mut caught_in_time = 0usize;
    let mut started = 0usize;
    let mut live: Vec<EnvState> = Vec::with_capacity(lanes);
    let lanes = lanes.max(1);
    while started < episodes && live.len() < lanes {
        live.push(env::reset(cfg, rng)?);
        started += 1;
    }
    while !live.is_empty() {
        let actions = policy.act_batch(&live, rng)?;
        let mut next = Vec::with_capacity(live.len());
        for (s, a) in live.iter().zip(actions) {
            let out = env::step(cfg, s, &a, rng)?;
            if out.done {
                lengths.push(out.state.step_count as f64);
                if out.reward > 0.0 && out.state.step_count <= SUCCESS_HORIZON {
                    caught_in_time += 1;
                }
                if started < episodes {
                    next.push(env::reset(cfg, rng)?);
                    started += 1;
                }
            } else {
                next.push(out.state);
            }
        }
        live = next;
    }
    let n = lengths.len().max(1) as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok(EpisodeStats {
        episodes: lengths.len(),
        mean_steps: mean,
        std_steps: var.sqrt(),
        success_rate_10: caught_in_time as f64 / n,
    })
}
