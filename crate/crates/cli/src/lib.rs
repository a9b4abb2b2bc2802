//! Experiment harness for the `gendrop` command-line tool.

pub mod config;
pub mod run;
