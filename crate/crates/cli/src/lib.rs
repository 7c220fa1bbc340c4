//! Command-line front end: configuration, run artifacts, studies and oracle checks.

pub mod artifact;
pub mod config;
pub mod error;
pub mod render;
pub mod simulate;
pub mod study;
pub mod verify;

pub use config::{Overrides, RunConfig};
pub use error::{CliResult, Failure};
