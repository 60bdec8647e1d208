pub mod correction;
pub mod error;
pub mod estimator;
pub mod forward;
pub mod harness;
pub mod nn;
pub mod pad;
pub mod rng;

pub use error::{Error, Result};
