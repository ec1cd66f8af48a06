//! Desk-scale simultaneous translation with monotonic multihead attention
//! and language-model lookahead fused into the read/write energies.

pub mod error;
pub mod alignment;
pub mod attention;
pub mod cli;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod streaming;
pub mod verify;
pub mod tasks;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run()
}
