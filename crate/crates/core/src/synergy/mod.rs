//! Prediction head, loss, training loop, grid search and checkpoints.

mod checkpoint;
mod config;
mod grid;
mod model;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, TrainConfig};
pub use grid::{expand_grid, grid_search, Grid, GridResult, GridRow};
pub use model::{augment, bce_loss, Model, ModelDims, ModelInputs};
pub use train::{
    cross_validate, derive_seed, train, train_fold, training_propagation, CvOutcome, EpochRecord, FoldOutcome,
    StopReason, TrainReport, Trained,
};
