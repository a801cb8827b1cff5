pub mod aggregation;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod sampling;
pub mod scoring;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
