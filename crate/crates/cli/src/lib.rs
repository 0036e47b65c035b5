//! Library surface of the command-line frontend: configuration, dataset
//! layout, checkpoint format, image I/O, and the subcommand implementations.
//! The `splat4d` binary is a thin argument parser over these modules.

pub mod checkpoint;
pub mod cmd;
pub mod config;
pub mod dataset;
pub mod io;
