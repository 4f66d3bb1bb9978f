pub mod error;
pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod latent;
pub mod rff;
pub mod samplers;
pub mod synth;

pub use error::{Error, Result};
