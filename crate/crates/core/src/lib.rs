//! Data factory, robustness protocol and assistant pipeline for part-level
//! visual question answering.
//!
//! Every stage that processes many independent items takes an [`Exec`]
//! selecting rayon-backed or sequential iteration. Results are identical
//! either way; building without the `parallel` feature removes rayon.

pub mod assistant;
pub mod barrefine;
pub mod corruptions;
pub mod detorch;
pub mod detpost;
pub mod error;
pub mod evalmetrics;
pub mod exec;
pub mod fixtures;
pub mod fsutil;
pub mod geometry;
pub mod knowledge;
pub mod labels;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
pub use exec::Exec;
