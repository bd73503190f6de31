//! Experiment driver: data generation, training, evaluation, shift sweeps
//! and the invariant checks behind `bandex verify`.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod verify;

pub use error::{CliError, Result};
