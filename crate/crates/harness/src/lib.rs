//! Experiment harness for the `frugal` optimizer: JSON run configurations,
//! optimizer-state accounting, the re-projection toy, principal-angle
//! analysis, convergence-rate checks and CSV/JSON reporting.

pub mod angles;
pub mod config;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod rate;
pub mod toy;

pub use error::{HarnessError, Result};
