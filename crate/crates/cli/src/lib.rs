//! Command-line entry points and the HTTP chat service.

pub mod commands;
pub mod context;
pub mod service;

pub use commands::{run, Cli};
