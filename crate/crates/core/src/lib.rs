//! Bidirectional action-dependent Q-learning (ACE).
//!
//! A multi-agent MDP is unrolled into a single-agent MDP whose states carry
//! the actions already chosen in the current step. Agents then act one at a
//! time, each maximising a value over the rolled-out successor states, and the
//! value function is trained with ordinary single-agent Bellman targets.
//!
//! Modules:
//! - [`mmdp`]: sequential expansion of joint transitions.
//! - [`env`]: the Spiders-and-Fly gridworld.
//! - [`oracle`]: exact value iteration, oracle policy and equivalence checks.
//! - [`neural`]: dense layers, optimisers, checkpoints, gradient checking.
//! - [`model`]: unit encoder, action embeddings and value/logit heads.
//! - [`learner`]: the ACE Q-learning loop.
//! - [`ppo`]: the actor-critic variant.
//! - [`config`] and [`cli`]: run configuration and command-line tasks.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod learner;
pub mod mmdp;
pub mod model;
pub mod neural;
pub mod oracle;
pub mod ppo;
pub mod seeding;
pub mod verify;

pub use error::{AceError, Result};
