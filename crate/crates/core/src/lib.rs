//! Information-bottleneck camera fingerprints for image splice localization.
//!
//! A stochastic encoder is trained on camera-model identification under a
//! variational information-bottleneck objective; its per-patch Gaussian codes
//! are then segmented by a two-component mixture to localize spliced regions.

pub mod error;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod dataset;
pub mod objective;
pub mod oracle;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
