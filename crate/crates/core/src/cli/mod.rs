//! The `dice` command-line front end and the evaluation pipeline behind it.

pub mod commands;
pub mod config;
pub mod eval;
pub mod fixture;
pub mod heatmap;
pub mod manifest;
pub mod pairing;
pub mod report;

pub use commands::{run, Cli};
