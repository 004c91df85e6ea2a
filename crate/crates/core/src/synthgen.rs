//! Synthetic bird trajectories with noisy detections, for testing the
//! fitter against known ground truth.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CropTransform, Mask};
use crate::losses::{Keypoint, ObservationFrame};
use crate::metrics::GtKeypoint;
use crate::silhouette::render_soft_silhouette;
use crate::silhouette::SilhouetteConfig;
use crate::skeleton::{forward_kinematics, project, Camera, PoseParams, SkeletonModel};

/// Motion and detection-noise settings. Angles are in radians, distances in
/// pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionSpec {
    /// Standard deviation of each body-pose angle around the prior mean.
    pub joint_amplitude: f64,
    /// Standard deviation of the yaw around `base_yaw`.
    pub yaw_amplitude: f64,
    /// Standard deviation of the pitch and roll components.
    pub tilt_amplitude: f64,
    /// Standard deviation of the root position around `center`.
    pub translation_amplitude: f64,
    /// Width of the moving-average low-pass applied to the random walks.
    pub smoothing: usize,
    pub base_yaw: f64,
    /// Mean root position in pixels; the principal point when absent.
    pub center: Option<[f64; 2]>,
    pub sigma: f64,
    /// Standard deviation of the Gaussian keypoint noise.
    pub noise_px: f64,
    /// Probability that a keypoint is replaced by an outlier.
    pub outlier_prob: f64,
    /// Outliers are displaced by this many pixels in a random direction.
    pub outlier_px: f64,
    /// Confidence range of regular detections.
    pub confidence: (f64, f64),
    /// Confidence range of outliers.
    pub outlier_confidence: (f64, f64),
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            joint_amplitude: 0.15,
            yaw_amplitude: 0.5,
            tilt_amplitude: 0.1,
            translation_amplitude: 10.0,
            smoothing: 9,
            base_yaw: 0.0,
            center: None,
            sigma: 1.0,
            noise_px: 3.0,
            outlier_prob: 0.05,
            outlier_px: 40.0,
            confidence: (0.6, 1.0),
            outlier_confidence: (0.05, 0.4),
        }
    }
}

impl MotionSpec {
    /// No motion and no detection noise.
    pub fn still() -> Self {
        Self {
            joint_amplitude: 0.0,
            yaw_amplitude: 0.0,
            tilt_amplitude: 0.0,
            translation_amplitude: 0.0,
            noise_px: 0.0,
            outlier_prob: 0.0,
            confidence: (1.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("joint_amplitude", self.joint_amplitude),
            ("yaw_amplitude", self.yaw_amplitude),
            ("tilt_amplitude", self.tilt_amplitude),
            ("translation_amplitude", self.translation_amplitude),
            ("noise_px", self.noise_px),
            ("outlier_px", self.outlier_px),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::invalid("outlier_prob", format!("must lie in [0, 1], got {}", self.outlier_prob)));
        }
        if self.smoothing == 0 {
            return Err(Error::invalid("smoothing", "must be at least 1"));
        }
        for (name, (lo, hi)) in [("confidence", self.confidence), ("outlier_confidence", self.outlier_confidence)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(name, format!("range ({lo}, {hi}) is not inside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub poses: Vec<PoseParams>,
    pub observations: Vec<ObservationFrame>,
    /// Noise-free projected keypoints, visible when inside the image.
    pub ground_truth: Vec<Vec<GtKeypoint>>,
    /// Which detections were replaced by outliers.
    pub outliers: Vec<Vec<bool>>,
}

/// Band-limited random walk of length `n` with the given standard
/// deviation: cumulative Gaussian steps, a centered moving average, then
/// removal of the mean and rescaling.
fn random_walk(rng: &mut ChaCha8Rng, n: usize, amplitude: f64, smoothing: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut walk = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += normal.sample(rng);
        walk.push(acc);
    }
    if amplitude == 0.0 || n < 2 {
        return vec![0.0; n];
    }
    let half = smoothing / 2;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            walk[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let mean = smooth.iter().sum::<f64>() / n as f64;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std == 0.0 {
        return vec![0.0; n];
    }
    smooth.iter().map(|v| (v - mean) * amplitude / std).collect()
}

/// Ground-truth poses only.
pub fn generate_poses(model: &SkeletonModel, camera: &Camera, frames: usize, spec: &MotionSpec, seed: u64) -> Result<Vec<PoseParams>> {
    spec.validate()?;
    camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(poses_with(&mut rng, model, camera, frames, spec))
}

fn poses_with(rng: &mut ChaCha8Rng, model: &SkeletonModel, camera: &Camera, frames: usize, spec: &MotionSpec) -> Vec<PoseParams> {
    let dim = model.pose_dim();
    let mut walk = |amp: f64| random_walk(rng, frames, amp, spec.smoothing);
    let tx = walk(spec.translation_amplitude);
    let ty = walk(spec.translation_amplitude);
    let roll = walk(spec.tilt_amplitude);
    let pitch = walk(spec.tilt_amplitude);
    let yaw = walk(spec.yaw_amplitude);
    let joints: Vec<Vec<f64>> = (0..dim).map(|_| walk(spec.joint_amplitude)).collect();
    let center = spec.center.unwrap_or(camera.principal);
    let mean = model.prior_mean();
    (0..frames)
        .map(|t| PoseParams {
            kappa: camera.kappa_for_pixel(Vector2::new(center[0] + tx[t], center[1] + ty[t])),
            sigma: spec.sigma,
            theta_g: Vector3::new(roll[t], pitch[t], spec.base_yaw + yaw[t]),
            theta_p: (0..dim).map(|i| mean[i] + joints[i][t]).collect(),
        })
        .collect()
}

/// Generates `frames` frames of a moving bird seen by `camera`, with noisy
/// keypoint detections and binary masks thresholded from the silhouette.
/// Observations live in the camera's image space with identity crop
/// transforms; frames whose mask is empty are marked missing.
pub fn generate_trajectory(model: &SkeletonModel, camera: &Camera, frames: usize, spec: &MotionSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = poses_with(&mut rng, model, camera, frames, spec);
    let noise = Normal::new(0.0, spec.noise_px.max(f64::MIN_POSITIVE)).expect("valid std");
    let (w, h) = camera.image_size;
    let sharpness = SilhouetteConfig::default().sharpness;

    let mut observations = Vec::with_capacity(frames);
    let mut ground_truth = Vec::with_capacity(frames);
    let mut outliers = Vec::with_capacity(frames);
    for (t, pose) in poses.iter().enumerate() {
        let posed = forward_kinematics(model, pose)?;
        let clean = project(camera, &posed.keypoints)?;
        let gt: Vec<GtKeypoint> = clean.iter().map(|p| GtKeypoint::new(p.x, p.y, p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64)).collect();
        let mut flags = Vec::with_capacity(clean.len());
        let keypoints = clean
            .iter()
            .map(|p| {
                let outlier = spec.outlier_prob > 0.0 && rng.gen_bool(spec.outlier_prob);
                flags.push(outlier);
                if outlier {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let c = uniform(&mut rng, spec.outlier_confidence);
                    Keypoint::new(p.x + spec.outlier_px * angle.cos(), p.y + spec.outlier_px * angle.sin(), c)
                } else {
                    let (dx, dy) = if spec.noise_px > 0.0 { (noise.sample(&mut rng), noise.sample(&mut rng)) } else { (0.0, 0.0) };
                    Keypoint::new(p.x + dx, p.y + dy, uniform(&mut rng, spec.confidence))
                }
            })
            .collect();
        let soft = render_soft_silhouette(model, pose, camera, sharpness)?;
        let mask = Mask::from_vec(w, h, soft.values.iter().map(|&v| v > 0.5).collect())?;
        let (bbox, missing) = match mask.tight_bbox() {
            Some(b) => (b, false),
            None => (crate::geometry::BBox::new(0.0, 0.0, w as f64, h as f64), true),
        };
        observations.push(ObservationFrame { frame_index: t as i64, keypoints, mask, bbox, transform: CropTransform::identity(), missing });
        ground_truth.push(gt);
        outliers.push(flags);
    }
    Ok(SyntheticSequence { poses, observations, ground_truth, outliers })
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}
