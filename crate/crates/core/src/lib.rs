//! Prompt-free 3D adaptation of a promptable 2D segmentation transformer.
//!
//! The crate covers synthetic test assets, the volumetric preprocessing
//! chain, the adapted encoder with its prompt generator and mask decoder,
//! training, sliding-window inference and Dice/NSD evaluation.

pub mod archive;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod phantom;
pub mod prompt;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
