//! Patience-based early exit for multi-exit networks.
//!
//! This crate is `no_std` (it needs `alloc`). It holds everything that is
//! pure computation: dense numerics, the multi-exit model and its trainer,
//! exit policies, adaptive inference, synthetic datasets, and the
//! classifier-chain theory lab (accuracy-improvement conditions and a
//! seeded Monte Carlo simulator). File formats, the experiment harness and
//! the command-line tool live in the `pabee` crate.
#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod theory;

pub use error::{Error, Result};
