//! Artifact pipeline, CLI commands and the live session server.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod server;
pub mod session;
pub mod store;
pub mod table;

pub use config::RunConfig;
pub use error::{Error, Result};
