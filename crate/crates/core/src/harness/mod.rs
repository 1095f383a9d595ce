//! Toy dataset, configuration, optimizer, training loop and invariant checks.

pub mod check;
pub mod config;
pub mod dataset;
pub mod optim;
pub mod train;

pub use config::TrainConfig;
pub use dataset::{gen_toy_dataset, DatasetConfig, ToyDataset};
pub use optim::{AdamW, AdamWConfig};
pub use train::{evaluate, evaluate_checkpoint, read_log, train, train_step, EvalReport, LogRow, Phase, TrainReport};
