//! Configuration, scenarios and file output for the `dynbc` command-line tool.

pub mod config;
pub mod manufactured;
pub mod output;
pub mod scenario;
