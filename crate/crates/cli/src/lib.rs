//! Filesystem and command-line layer for the perception workbench.
//!
//! The core crate owns the math; this crate owns everything that touches
//! disk: point-cloud files, dataset directories, experiment configs,
//! reports, plots, and the subcommands that chain them into experiments.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod pcd;
pub mod plot;
pub mod report;
