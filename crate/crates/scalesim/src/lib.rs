//! Scale simulation estimators for compositional surveys.
//!
//! Sequence-count style data identify the composition of a system but not
//! its scale. This crate draws posterior compositions from count data,
//! combines them with explicit probabilistic models of the unmeasured
//! scale, and turns the result into differential-abundance decisions,
//! sensitivity sweeps, and bias/FDR studies.

pub mod aldex;
pub mod cli;
pub mod coda;
pub mod config;
pub mod decisions;
pub mod error;
pub mod io;
pub mod mln;
pub mod numkit;
pub mod scale_models;
pub mod studies;

pub use error::{Error, Result};
pub use numkit::Stream;
