//! Command implementations, file plumbing, and synthetic data.

pub mod commands;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod synth;

pub use config::{RunConfig, RunPaths};
pub use synth::{generate, SignalMode, SyntheticSpec};
