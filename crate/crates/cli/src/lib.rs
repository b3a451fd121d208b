//! Library surface of the command-line tool, so integration tests can drive
//! the same code paths the binary uses.

pub mod commands;
pub mod config;
pub mod formats;
pub mod model;
