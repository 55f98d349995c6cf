//! Scenario harness around `flowfilt-core`: JSON scenario configs, a CSV /
//! JSON output layer, and the execution glue used by the `flowfilt` binary.

pub mod config;
pub mod output;
pub mod runner;
