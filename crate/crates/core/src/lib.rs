//! Realistic two-speaker mixture forge and separation benchmark.

pub mod corpus;
pub mod duplex;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod separator;
pub mod signal;
pub mod spectral;

pub use error::{Error, Result};
