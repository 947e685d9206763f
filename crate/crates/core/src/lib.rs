//! Region-affinity attention multiple-instance learning on cached token grids.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod mil;
pub mod objective;
pub mod optim;
pub mod raa;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
