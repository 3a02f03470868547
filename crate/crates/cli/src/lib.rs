//! Command-line runner and benchmark harness.

pub mod app;
pub mod bench;
