//! Desk-scale laboratory for text-to-distribution quantile regression.

pub mod data;
pub mod distributions;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod monotonic;
pub mod pipeline;
pub mod retrieval;
pub mod theory;

pub use error::{Error, Result};
