//! Host-side companion to `pabee-core`: checkpoint and config file formats,
//! the experiment harness, parallel simulation drivers and the `pabee` CLI.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csv;
pub mod error;
pub mod sim;
pub mod wallclock;

pub use error::{Error, Result};
