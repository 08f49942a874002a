//! Simulation, experiments and command-line plumbing on top of
//! [`kelly_ou_core`].

pub mod cli;
pub mod config;
pub mod ensemble;
mod error;
pub mod experiments;
pub mod output;
pub mod stats;

pub use error::{Error, Result};
