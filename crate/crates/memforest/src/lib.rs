//! Std companion to `memforest-core`: snapshot directories, session input
//! files, TOML configuration, HTTP model backends, a thread executor and the
//! benchmark harness behind the `memforest` binary.

pub mod config;
pub mod exec;
pub mod http;
pub mod input;
pub mod snapshot;
pub mod bench;
pub mod synth;
pub mod cli;
