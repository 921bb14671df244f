//! Seed fan-out.
//!
//! Every random consumer draws from `ChaCha8Rng::seed_from_u64(master)` with
//! its own stream id, so streams never overlap and adding a consumer never
//! shifts the draws of another. Stream ids:
//!
//! | stream            | consumer                           |
//! |-------------------|------------------------------------|
//! | 0                 | parameter initialisation           |
//! | 1                 | replay sampling                    |
//! | 2                 | evaluation episodes                |
//! | 3                 | PPO minibatch shuffling            |
//! | 1000 + w          | collector environment `w`          |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_STREAM: u64 = 0;
pub const REPLAY_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const MINIBATCH_STREAM: u64 = 3;
pub const ENV_STREAM_BASE: u64 = 1000;

pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

pub fn env_rng(master: u64, worker: usize) -> ChaCha8Rng {
    stream_rng(master, ENV_STREAM_BASE + worker as u64)
}
