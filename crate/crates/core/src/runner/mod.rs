//! Run configuration, optimizer, checkpoints, the training loop and the
//! command implementations behind the `rotdg` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod optim;
pub mod plot;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use commands::{cmd_ablate, cmd_eval, cmd_gen, cmd_train, evaluate_samples, AblationResults};
pub use config::{AblationConfig, BankConfig, DataConfig, OptimizerConfig, RunConfig};
pub use optim::Sgd;
pub use plot::cmd_plot;
pub use train::{build_bank, train, LossRecord, TrainOutput};
