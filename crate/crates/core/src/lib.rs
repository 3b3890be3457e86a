pub mod baselines;
pub mod encoding;
pub mod error;
pub mod field;
pub mod geometry;
pub mod grad;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod projector;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
