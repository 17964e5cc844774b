//! Timing models: slot scheduling, expert-parallel simulation and expert
//! offloading.

pub mod distsim;
pub mod error;
pub mod offload;
pub mod sched;

pub use error::{Result, SimError};
