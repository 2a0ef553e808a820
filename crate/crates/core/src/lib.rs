//! Naturalistic adversarial patches against object detectors.
//!
//! The crate bundles three attack families (pixel-space PGD, pretrained
//! generator latent optimisation and combined patch/GAN training), the
//! detector and generator abstractions they drive, COCO-style dataset
//! handling, and AP/mAP evaluation.

pub mod attacks;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod generators;
pub mod imageio;
pub mod nn;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use patch::{Patch, Placement, TransformConfig};
pub use tensor::Tensor;
