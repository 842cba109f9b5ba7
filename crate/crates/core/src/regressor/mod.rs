//! Neural configuration-to-loss regressor.

pub mod adamw;
pub mod checkpoint;
pub mod network;
pub mod schedule;
pub mod train;

pub use adamw::{adamw_step, AdamWHyper, AdamWState};
pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint};
pub use network::{Architecture, Block, BlockGroup, Grads, Inputs, Model};
pub use schedule::{lr_at, WarmupSpec};
pub use train::{
    build_examples, curve_sample_indices, train, EpochMetrics, StagePlan, TargetKind, TrainPlan, TrainedPredictor, Trainer,
    TrainingReport,
};
