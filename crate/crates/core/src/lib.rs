//! Monocular joint depth estimation and semantic segmentation.
//!
//! A ViT encoder feeds two task-specific feature pyramids; a shared-weight
//! decoder fuses them with cross-task channel/spatial attention and refines
//! the result over several gated iterations.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reassemble;

pub use error::{Error, Result};
