//! Command-line harness: run configuration, JSONL persistence of cases,
//! sessions, and panel scores, and report emission.

pub mod commands;
pub mod config;
pub mod persist;
pub mod report;

pub use commands::run_command;
