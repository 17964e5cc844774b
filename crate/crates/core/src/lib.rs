//! Numeric laboratory for shortcut-connected mixture-of-experts layers.

pub mod analysis;
pub mod arch;
pub mod error;
pub mod gating;
pub mod grad;
pub mod numkit;

pub use error::{Error, Result};
