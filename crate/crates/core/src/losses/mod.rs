//! Energy terms of the fitting objective.
//!
//! Frame-wise terms: robust keypoint reprojection ([`keypoint_loss`]), L1
//! silhouette agreement ([`mask_loss`]) and a Mahalanobis pose prior
//! ([`pose_prior_loss`]). Temporal terms ([`velocity_loss`],
//! [`acceleration_loss`]) couple consecutive frames of a window, and
//! [`total_objective`] combines everything with exact gradients.

mod objective;
mod temporal;

pub use objective::{total_objective, EnergyTerms, Evaluation, Objective, Stage};
pub use temporal::{acceleration_loss, acceleration_loss_grad, velocity_loss, velocity_loss_grad, SMOOTH_NORM_EPS};

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropTransform, Mask};
use crate::silhouette::SoftSilhouette;
use crate::skeleton::SkeletonModel;

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kpt: f64,
    pub lambda_msk: f64,
    pub lambda_pp: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    /// Temporal weight of the global orientation.
    pub beta_g: f64,
    /// Temporal weight of the body pose.
    pub beta_p: f64,
    /// Geman-McClure scale in pixels.
    pub gm_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_kpt: 1.0, lambda_msk: 1.0, lambda_pp: 100.0, lambda_vel: 0.0, lambda_acc: 0.0, beta_g: 10.0, beta_p: 1.0, gm_sigma: 50.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_kpt", self.lambda_kpt),
            ("lambda_msk", self.lambda_msk),
            ("lambda_pp", self.lambda_pp),
            ("lambda_vel", self.lambda_vel),
            ("lambda_acc", self.lambda_acc),
            ("beta_g", self.beta_g),
            ("beta_p", self.beta_p),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(name, format!("weight must be finite and non-negative, got {w}")));
            }
        }
        if !(self.gm_sigma > 0.0) {
            return Err(Error::invalid("gm_sigma", format!("must be positive, got {}", self.gm_sigma)));
        }
        Ok(())
    }
}

/// A detected 2D keypoint with its detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// One bird in one frame, in normalized crop space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub frame_index: i64,
    pub keypoints: Vec<Keypoint>,
    /// Target silhouette in crop space.
    pub mask: Mask,
    /// Detection box in original image pixels.
    pub bbox: BBox,
    /// Map from image pixels to this crop.
    pub transform: CropTransform,
    /// No usable detection in this frame; only prior and temporal terms apply.
    pub missing: bool,
}

impl ObservationFrame {
    pub fn validate(&self, model: &SkeletonModel, crop_size: (usize, usize)) -> Result<()> {
        if self.missing {
            return Ok(());
        }
        Error::check_len("keypoints", model.num_keypoints(), self.keypoints.len())?;
        if let Some(kp) = self.keypoints.iter().find(|k| !(0.0..=1.0).contains(&k.confidence)) {
            return Err(Error::invalid("confidence", format!("{} is outside [0, 1]", kp.confidence)));
        }
        self.bbox.validate("bbox")?;
        Error::check_len("mask width", crop_size.0, self.mask.width())?;
        Error::check_len("mask height", crop_size.1, self.mask.height())?;
        Ok(())
    }
}

/// One Geman-McClure term `c·σ²r²/(σ² + r²)` with `r²` the squared residual.
#[inline]
pub fn geman_mcclure(r2: f64, confidence: f64, gm_sigma: f64) -> f64 {
    let s2 = gm_sigma * gm_sigma;
    confidence * s2 * r2 / (s2 + r2)
}

/// Robust keypoint reprojection loss.
pub fn keypoint_loss(projected: &[Vector2<f64>], keypoints: &[Keypoint], gm_sigma: f64) -> Result<f64> {
    Error::check_len("keypoints", projected.len(), keypoints.len())?;
    Ok(projected.iter().zip(keypoints).map(|(p, k)| geman_mcclure((p - k.position()).norm_squared(), k.confidence, gm_sigma)).sum())
}

/// Keypoint loss and its gradient with respect to the projected points.
pub fn keypoint_loss_grad(projected: &[Vector2<f64>], keypoints: &[Keypoint], gm_sigma: f64) -> Result<(f64, Vec<Vector2<f64>>)> {
    Error::check_len("keypoints", projected.len(), keypoints.len())?;
    let s2 = gm_sigma * gm_sigma;
    let mut total = 0.0;
    let grads = projected
        .iter()
        .zip(keypoints)
        .map(|(p, k)| {
            let e = p - k.position();
            let r2 = e.norm_squared();
            let denom = s2 + r2;
            total += k.confidence * s2 * r2 / denom;
            e * (2.0 * k.confidence * s2 * s2 / (denom * denom))
        })
        .collect();
    Ok((total, grads))
}

/// Mean absolute difference between a soft silhouette and a binary mask.
pub fn mask_loss(rendered: &SoftSilhouette, target: &Mask) -> Result<f64> {
    Error::check_len("mask width", rendered.width, target.width())?;
    Error::check_len("mask height", rendered.height, target.height())?;
    let sum: f64 = rendered.values.iter().zip(target.data()).map(|(&s, &m)| (s - if m { 1.0 } else { 0.0 }).abs()).sum();
    Ok(sum / rendered.values.len() as f64)
}

/// Squared Mahalanobis distance of the body pose from the prior mean.
pub fn pose_prior_loss(theta_p: &[f64], model: &SkeletonModel) -> Result<f64> {
    Error::check_len("theta_p", model.pose_dim(), theta_p.len())?;
    let d = DVector::from_column_slice(theta_p) - model.prior_mean();
    Ok(d.dot(&(model.prior_cov_inv() * &d)))
}

pub(crate) fn pose_prior_loss_grad(theta_p: &[f64], model: &SkeletonModel) -> (f64, DVector<f64>) {
    let d = DVector::from_column_slice(theta_p) - model.prior_mean();
    let sd = model.prior_cov_inv() * &d;
    (d.dot(&sd), sd * 2.0)
}
