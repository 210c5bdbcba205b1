//! Command-line driver: run configs, backends and the subcommands.

pub mod app;
pub mod backend;
pub mod chart;
pub mod commands;
pub mod config;
pub mod error;
