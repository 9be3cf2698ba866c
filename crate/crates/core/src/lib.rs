//! Weakly supervised cell instance segmentation from dot annotations.
//!
//! The crate covers coarse label generation, a two-head U-Net engine with
//! LRP-α1 relevance propagation, the feature re-weighting loss and trainer,
//! Split-and-Expand post-processing, and object-level metrics.

pub mod dataset;
pub mod error;
pub mod labels;
pub mod losses;
pub mod lrp;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
