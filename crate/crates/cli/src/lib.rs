//! Config-driven command-line harness for the Landau particle solver,
//! grid oracle and relative-entropy certificates.

pub mod commands;
pub mod config;
pub mod output;
