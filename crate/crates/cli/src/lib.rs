//! Command-line frontend for the trace deduplication engine.
//!
//! The binary owns flag parsing and exit codes; everything else lives in
//! library modules so tests can drive full workflows in-process.

pub mod adapters;
pub mod commands;
pub mod config;
pub mod state;
