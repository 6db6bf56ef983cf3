//! Training, evaluation and datasets.

pub mod config;
pub mod data;
pub mod optim;
pub mod trainer;

pub use config::{DataConfig, ModelConfig, SchedulerConfig, TrainConfig};
pub use data::{epoch_order, load_splits, mnist_dataset, normalize_splits, toy_dataset, toy_splits, Dataset};
pub use optim::{Adam, PlateauScheduler};
pub use trainer::{evaluate, Checkpoint, EpochMetrics, EvalReport, Trainer};
