//! Reverse-mode differentiation of the matching pipeline and the
//! unsupervised trainer built on it.

mod adam;
mod tape;
mod train;

pub use adam::{adam_step, AdamMoments, AdamParams};
pub use tape::{column, Gradients, Tape, Var};
pub use train::{pair_gradient, train, LossRecord, PairGradient, TrainerConfig, TrainingOutcome};
