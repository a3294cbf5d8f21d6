//! Pipeline stages behind the `sparsemo` command.

pub mod commands;
pub mod config;

pub use commands::RunLayout;
pub use config::{Ablation, Overrides, RunConfig};
