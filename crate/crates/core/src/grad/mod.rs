//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! Every optimiser in the crate (embedder training, jamming, poisoning,
//! spoofing, the GAN) runs on this engine. Complex baseband samples are
//! carried as two stacked real channels `[.., 2, len]` (I first, then Q), so
//! the engine itself stays real-valued.
//!
//! The engine is generic over [`Scalar`]; models train in `f32` and the
//! gradient checks instantiate the same code in `f64`.

mod adam;
mod check;
mod suite;
mod conv;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use adam::Adam;
pub use check::finite_diff_check;
pub use suite::{op_suite, suite_ops, OpCheck};
pub use conv::{conv1d_output_len, Conv1dSpec};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type usable on a [`Tape`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardAlreadyRun,
    #[error("backward has not been run on this tape")]
    NoGradients,
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("optimiser state does not match parameter {index}")]
    StateMismatch { index: usize },
}

pub type Result<T> = std::result::Result<T, GradError>;
