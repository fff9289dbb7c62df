//! Inversion-free image editing on rectified flows, with frequency-domain
//! interaction and attention feature injection between the source and target
//! branches.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: noise levels, Gaussian draws, Euler stepping
//! - [`spectral`]: 2D FFT, Gaussian low-pass masks, band fusion
//! - [`prompt`]: hash-based prompt embeddings
//! - [`model`]: velocity fields, classifier-free guidance, attention hooks
//! - [`fia`]: turns captured attention features into target-pass overrides
//! - [`edit`]: the editing loop
//! - [`codec`], [`ppm`], [`metrics`], [`fixtures`]: image plumbing

pub mod codec;
pub mod edit;
pub mod error;
pub mod fia;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod ppm;
pub mod prompt;
pub mod schedule;
pub mod spectral;

pub use error::{FiaError, Result};
