//! Front end of the geotrust pipeline: command line and HTTP server.

pub mod error;
pub mod server;

pub use error::{CliError, CliResult};
