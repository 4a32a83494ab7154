//! Losses, Adam, the training loop and checkpoints.

mod adam;
pub mod checkpoint;
mod config;
pub mod loss;
mod trainer;

pub use adam::{OptState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{TrainConfig, MAX_CONSECUTIVE_SKIPS};
pub use loss::{geometric_kappa, loss_grad, loss_mse, objective, objective_graph, ObjectiveWeights};
pub use trainer::{sample_batch, train_loop, write_log, Batch, LogRow, Trainer};
