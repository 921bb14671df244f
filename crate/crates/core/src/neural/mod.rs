//! A small dense-network engine: parameters with gradients, dense layers with
//! hand-written backward passes, optimisers, checkpoints and a finite
//! difference gradient checker.
//!
//! Everything is generic over [`Real`] so the training graph (f32) and the
//! gradient-check graph (f64) are the same code.

mod checkpoint;
mod dense;
mod gradcheck;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};
pub use dense::{max_pool, mean_pool, mean_pool_backward, Activation, Dense, DenseCache};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use optim::{soft_update, Adam, Optimizer, RmsProp};
pub use params::{Param, ParamId, ParamStore};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the engine.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}
