//! Command-line front end of kinecal: simulate experiments, calibrate,
//! analyze observability, evaluate on held-out data and compare closure
//! campaigns. Every command writes JSON reports under its output directory.

pub mod commands;
pub mod config;

pub use commands::Outcome;
pub use config::{RunConfig, SplitMode};
