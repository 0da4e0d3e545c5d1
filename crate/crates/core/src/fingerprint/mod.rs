//! The defended system: a convolutional embedder mapping headers to unit-norm
//! fingerprints, the angular distance between fingerprints, threshold
//! calibration and the accept/update authentication policy.

mod model;
mod policy;
mod train;
mod verify;

use thiserror::Error;

use crate::grad::GradError;
use crate::signal::SignalError;

pub use model::{distance, distance_on_tape, embed, embed_batch, EmbedderArch, EmbedderModel, Embedding};
pub use policy::{calibrate_threshold, threshold_from_distances, AuthDecision, AuthPolicy};
pub use train::{train_embedder, TrainConfig, TrainingLog};
pub use verify::{enroll_first, first_per_transmitter, pair_distances, PairDistances};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FingerprintError {
    #[error("waveform length {got} does not match model input length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("embedding is not unit norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("no distances to calibrate on")]
    EmptyPairs,
    #[error("target acceptance rate must lie in (0, 1], got {0}")]
    InvalidTarget(f64),
    #[error("transmitter {0} is not enrolled")]
    UnknownTransmitter(u32),
    #[error("thresholds must satisfy 0 <= u < a <= 1 (a = {accept}, u = {update})")]
    InvalidThresholds { accept: f64, update: f64 },
    #[error("reference capacity must be at least 1")]
    ZeroCapacity,
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, FingerprintError>;
