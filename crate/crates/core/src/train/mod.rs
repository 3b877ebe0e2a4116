//! Optimization, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod evaluate;
mod gradcheck;
mod trainer;

pub use adam::{Adam, AdamConfig, StepStats};
pub use checkpoint::{Checkpoint, CheckpointMeta, StoredParam, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{full_graph_grad_check, random_batch};
pub use evaluate::{evaluate, score, Dataset, Evaluation, Example};
pub use trainer::{train, train_to_dir, EpochLog, TrainArtifacts, TrainOutcome};
