//! Training, evaluation, diagnostics, and experiment orchestration.

pub mod config;
pub mod diagnostics;
pub mod experiment;
pub mod train;

pub use config::{parse_config_file, parse_config_text};
pub use diagnostics::{estimate_lipschitz, routing_entropy, LipschitzReport};
pub use experiment::{run_experiment, ExperimentOpts};
pub use train::{eval_mse, mse_loss, train, train_on, Metrics, TrainConfig, TrainResult};
