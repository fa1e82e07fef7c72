pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod hha;
pub mod json;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// Version string written into every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
