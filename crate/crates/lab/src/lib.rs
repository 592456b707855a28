//! Hosted side of the memory-editing laboratory: file formats, run
//! configuration, experiment drivers, and the command-line interface. All
//! of the numerics live in `memedit-core`.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod formats;
pub mod world;
