//! Path-sampled training: per-path Adam moments, SAGA memory over paths,
//! baseline optimizers and the training loop.

mod problem;
mod state;
mod train;

pub use problem::{Example, LossGrad, LossKind, Problem};
pub use state::{sgd_step, Adam, AdamHyper, ScraplState, UpdateNorms};
pub use train::{decoder_seed, train, write_step_log, BaseOptimizer, Observer, StepReport, TrainConfig, TrainOutcome};
