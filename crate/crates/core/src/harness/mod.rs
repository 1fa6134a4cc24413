//! Experiment orchestration: configuration, training, evaluation,
//! checkpoints, ablations, online updates and serving helpers.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod model;
pub mod online;
pub mod serve;
pub mod train;

pub use ablation::{ablation_steps, run_ablation, run_one};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Flags};
pub use evaluate::{evaluate, evaluate_checkpoint, EvalSplit};
pub use online::{fit, FeedbackEvent, UpdateLog};
pub use serve::{Recommendation, Response, Server};
pub use model::{ModelParams, ModelShape, Resources};
pub use train::{train, TrainState, Trained};
