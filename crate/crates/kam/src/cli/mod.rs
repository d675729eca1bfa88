//! Configuration, orchestration and reports for the `kam` binary.

pub mod config;
pub mod example;
pub mod report;
pub mod runner;
