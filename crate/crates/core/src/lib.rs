pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod events;
pub mod featurizer;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
