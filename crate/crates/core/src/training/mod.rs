//! Losses, batched multi-frame training and checkpoints.

pub mod checkpoint;
pub mod losses;
pub mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use losses::{canvas_loss, canvas_loss_var, flow_matching_loss, flow_matching_loss_var, sample_mask_set, DropoutFlags, FlowDraw};
pub use step::{
    batch_loss, draw_batch, sample_batch, sequential_loss, train_step, GroupDraws, LossParts, StepMetrics, TrainBatch,
    TrainConfig, Trainer,
};
