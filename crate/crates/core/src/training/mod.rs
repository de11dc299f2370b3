//! Configuration, Adam, the epoch loop and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelKind, Toggles, TrainConfig, CONFIG_KEYS};
pub use trainer::{batches, epoch_order, log_csv, train, EpochLog, Trainer, LOG_HEADER};
