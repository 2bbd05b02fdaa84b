//! Experiment driver: config files, commands, and CSV outputs.
//!
//! The binary front end (`advpnml`) parses a JSON experiment config and runs
//! one of four commands: `gen-data`, `train`, `eval`, or `sweep`. This
//! library exposes the same machinery so tests can drive whole experiments
//! in-process.

pub mod config;
pub mod run;
pub mod table;
