//! Bounding-box normalized keypoint errors.
//!
//! `me_p` is the RMS of keypoint position errors divided by the longest side
//! of the bird's box. `me_v` applies the same to frame-to-frame keypoint
//! velocities, normalized by the box of the earlier frame. Only keypoints
//! visible in every frame involved are counted.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Ground-truth keypoint location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtKeypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl GtKeypoint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Sum of squared normalized errors and their count, so that errors from
/// several tracks can be pooled before taking the root.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSum {
    pub sum_sq: f64,
    pub count: usize,
}

impl ErrorSum {
    pub fn add(&mut self, other: ErrorSum) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    /// Root mean square; `None` when nothing was counted.
    pub fn rms(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum_sq / self.count as f64).sqrt())
    }
}

fn check(predicted: &[Vec<Vector2<f64>>], gt: &[Vec<GtKeypoint>], bboxes: &[BBox]) -> Result<()> {
    Error::check_len("ground truth frames", predicted.len(), gt.len())?;
    Error::check_len("bboxes", predicted.len(), bboxes.len())?;
    for (p, g) in predicted.iter().zip(gt) {
        Error::check_len("ground truth keypoints", p.len(), g.len())?;
    }
    for b in bboxes {
        b.validate("bbox")?;
    }
    Ok(())
}

pub fn position_errors(predicted: &[Vec<Vector2<f64>>], gt: &[Vec<GtKeypoint>], bboxes: &[BBox]) -> Result<ErrorSum> {
    check(predicted, gt, bboxes)?;
    let mut acc = ErrorSum::default();
    for ((p, g), b) in predicted.iter().zip(gt).zip(bboxes) {
        let scale = b.longest_side();
        for (pk, gk) in p.iter().zip(g) {
            if gk.visible {
                acc.sum_sq += ((pk - gk.position()) / scale).norm_squared();
                acc.count += 1;
            }
        }
    }
    Ok(acc)
}

pub fn velocity_errors(predicted: &[Vec<Vector2<f64>>], gt: &[Vec<GtKeypoint>], bboxes: &[BBox]) -> Result<ErrorSum> {
    check(predicted, gt, bboxes)?;
    let mut acc = ErrorSum::default();
    for t in 1..predicted.len() {
        let scale = bboxes[t - 1].longest_side();
        for k in 0..predicted[t].len() {
            let (g0, g1) = (gt[t - 1][k], gt[t][k]);
            if g0.visible && g1.visible {
                let dv = (predicted[t][k] - predicted[t - 1][k]) - (g1.position() - g0.position());
                acc.sum_sq += (dv / scale).norm_squared();
                acc.count += 1;
            }
        }
    }
    Ok(acc)
}

/// Normalized position error of one track.
pub fn me_p(predicted: &[Vec<Vector2<f64>>], gt: &[Vec<GtKeypoint>], bboxes: &[BBox]) -> Result<f64> {
    position_errors(predicted, gt, bboxes)?.rms().ok_or(Error::NoVisibleKeypoints)
}

/// Normalized velocity error of one track.
pub fn me_v(predicted: &[Vec<Vector2<f64>>], gt: &[Vec<GtKeypoint>], bboxes: &[BBox]) -> Result<f64> {
    velocity_errors(predicted, gt, bboxes)?.rms().ok_or(Error::NoVisibleKeypoints)
}
