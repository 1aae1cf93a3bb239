//! Set-based detection of rare blast events in flow-cytometry samples.

pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod synth;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
