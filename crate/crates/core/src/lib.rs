//! Hyperspectral classification with intrinsic feature decomposition.
//!
//! A shared convolutional trunk feeds two parallel heads: one learns
//! environment-related features, supervised by k-means pseudo classes over
//! pixel spectra; the other learns category-related features from the class
//! labels. A discriminator keeps the two feature families apart, and the
//! classifier sees their elementwise product.

pub mod cli;
pub mod datacube;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics_eval;
pub mod network;
pub mod pseudo_env;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
