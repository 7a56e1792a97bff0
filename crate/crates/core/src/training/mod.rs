//! Loss, optimizer, the equal-output constraint, batch sampling and the
//! per-stage training loop.

pub mod batches;
pub mod loss;
pub mod optim;
pub mod regularizer;
pub mod trainer;

pub use batches::{balanced_batches, shuffled_batches, BatchPlan};
pub use loss::cross_entropy;
pub use optim::{clip_global_norm, Optimizer, OptimizerConfig, OptimizerKind};
pub use regularizer::{equi_output_penalty, equi_output_projection, equi_output_tau, RegularizerMode, TauSource};
pub use trainer::{
    batch_gradient, best_epoch, BatchGradient, confusion, emotion_index, score, train_stage, EpochRecord, Scored, SegmentSet, Silent, StepRecord,
    TrainConfig, TrainObserver, TrainOutcome,
};
