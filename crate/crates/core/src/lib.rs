//! Style normalization and restitution (SNR) for domain-generalizable
//! re-identification, at desk scale: a reverse-mode autodiff core, the SNR
//! block and its dual causality loss, a four-stage convolutional backbone, a synthetic
//! style-shifted identity corpus, retrieval metrics and a training harness.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod losses;
pub mod model;
pub mod snr;

pub use error::{Error, Result};
