//! Operational shell: configuration, the HTTP service and the `dimrank` subcommands.

pub mod commands;
pub mod config;
pub mod service;
pub mod state;

pub use config::ServiceConfig;
