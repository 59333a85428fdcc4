//! Single-bit-upset fault injection for convolutional segmentation models.
//!
//! The crate bundles a small deterministic inference engine (f32 and int8
//! paths), a parametric U-Net zoo with a bit-exact file format, a bit-level
//! injector, statistically sized injection campaigns, a closed-form error
//! model for classifier-bias flips, and the pruning/quantization transforms
//! whose effect on robustness the campaigns measure.

pub mod campaign;
pub mod census;
pub mod compression;
pub mod error;
pub mod error_model;
pub mod inject;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
