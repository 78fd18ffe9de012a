//! Masked sequences and the differentiable operation set every model
//! variant is assembled from.

pub mod gradcheck;
mod lstm;
pub mod masked;
pub mod ops;
pub mod resample;
pub mod tape;
pub mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use gradcheck::{grad_check, GradInput, GradReport};
pub use masked::{MaskedSeq, SeqVar};
pub use ops::LstmWeights;
pub use resample::TimeWeights;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Binder, GradMap, ParamStore, Tensor};

/// Scalar type of tapes and parameters: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}
