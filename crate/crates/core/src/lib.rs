pub mod aggregator;
pub mod ar_decoder;
pub mod attention;
pub mod diffnum;
pub mod distill;
pub mod encoder;
mod error;
pub mod metrics;
pub mod model;
pub mod redundancy;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
