pub mod ablation;
pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod face;
pub mod m2s;
pub mod metrics;
pub mod seed;

pub use error::{Error, Result};

/// Recorded in checkpoints and run manifests.
pub const ARTIFACT_VERSION: &str = concat!("lipcycle-", env!("CARGO_PKG_VERSION"));
