//! Experiment drivers behind the `vecchia` command.

pub mod config;
pub mod experiments;
pub mod output;
pub mod rng;
