//! CLI library: dataset ingestion, synthetic generators, run configuration,
//! and the command implementations behind the `bpt` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod synth;
