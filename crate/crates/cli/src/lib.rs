//! Command-line front end for the unsupervised task-design and meta-training
//! pipeline: configuration, checkpoints, result reports, and the subcommand
//! implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;
