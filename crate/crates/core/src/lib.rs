//! Person-specific adversarial privacy masks for face-embedding models.
//!
//! One mask per identity, bounded in l-infinity norm, crafted against a
//! white-box surrogate embedding model and evaluated for transfer against
//! held-out black-box models under a 1:N identification protocol.

pub mod error;
pub mod data;
pub mod format;
pub mod hull;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};

/// Entry point used by the `gamask` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    0
}
