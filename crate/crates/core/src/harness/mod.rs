//! Configuration, checkpoints, training loops and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamRecord};
pub use config::{LrSchedule, RunConfig, Task, TowerConfig};
pub use model::Model;
pub use train::{train, EvalRow, TrainOutcome};
