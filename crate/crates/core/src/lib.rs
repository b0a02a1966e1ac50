//! Weakly supervised image manipulation localization.
//!
//! A dual-branch (convolution + transformer) classifier trained from
//! image-level labels only. Localization comes from fused class activation
//! maps that are binarized into a coarse mask, turned into box and point
//! prompts and refined by a pluggable promptable segmenter.

pub mod cam;
pub mod cgsr;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
