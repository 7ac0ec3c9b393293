//! Optimizers, the training loop, experiment orchestration and the CLI.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod optim;
mod train;

pub use config::{Ablation, DataConfig, OodSpec, Schedule, SyntheticData, TrainConfig};
pub use experiment::{
    export_embeddings, prepare_data, run_experiment, Experiment, ExperimentOptions, ExperimentReport, PreparedData,
};
pub use optim::{lr_at, OptimConfig, Optimizer, OptimizerKind};
pub use train::{train, EpochLog, RunRecord};
