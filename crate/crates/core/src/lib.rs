//! Probabilistic day-ahead scenario generation for portfolios of solar and
//! wind assets.

pub mod assess;
pub mod calibration;
pub mod clustering;
pub mod config;
pub mod correlation;
pub mod error;
pub mod factors;
pub mod ingest;
pub mod linalg;
pub mod meta;
pub mod optimize;
pub mod pipeline;
pub mod rescale;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
