//! Command implementations behind the `scmoe` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{
    cmd_analyze, cmd_gradcheck, cmd_offload, cmd_schedule, cmd_simulate, cmd_train, Format, Options, Outcome,
};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
