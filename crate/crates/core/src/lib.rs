//! Fits an articulated bird skeleton to per-frame 2D keypoint detections and
//! segmentation masks, jointly over temporal windows.
//!
//! The pipeline runs detections through the [`tracker`], normalizes each
//! detection into a square crop ([`preprocess`]), and fits a window of poses
//! with the [`fitter`]. [`metrics`] scores projected keypoints against
//! ground truth, and [`synthgen`] produces synthetic sequences with known
//! poses.

// Negated comparisons are used deliberately so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fitter;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod preprocess;
pub mod rotation;
pub mod silhouette;
pub mod skeleton;
pub mod synthgen;
pub mod tracker;

pub use error::{Error, Result};
pub use fitter::{fit_track, fit_window, FitConfig, FitResult, TrackFit};
pub use geometry::{BBox, CropTransform, Mask};
pub use losses::{Keypoint, LossWeights, ObservationFrame};
pub use skeleton::{Camera, PoseParams, SkeletonModel};

// The guide's code blocks run as doc tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/skeleton.md")]
    mod skeleton {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
