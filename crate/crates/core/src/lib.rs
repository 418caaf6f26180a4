//! Zero-shot anomaly classification and localization.
//!
//! Images are scored three ways: against averaged normal/anomalous text
//! tokens, against the patches of randomly paired reference images, and
//! against text after a per-image test-time adaptation of the patch tokens.
//! The [`cli`] module wires these into an evaluation pipeline with the
//! usual detection and localization metrics.

pub mod cli;
pub mod dtf;
pub mod encoder;
pub mod error;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod preprocess;
pub mod prompts;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tta;

pub use error::{DiceError, Result};
