//! Library side of the `scanfer` binary: run configuration, checkpoint
//! persistence and the command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
