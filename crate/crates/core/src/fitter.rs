//! Two-stage fitting of the articulated model to windows of observations.
//!
//! Each window is initialized from a yaw sweep on its first usable frame,
//! then optimized with Adam: first on keypoints, prior and temporal terms,
//! then with the silhouette term added.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{keypoint_loss, EnergyTerms, Keypoint, LossWeights, Objective, ObservationFrame};
use crate::preprocess::filter_observations;
use crate::silhouette::SilhouetteConfig;
use crate::skeleton::{fk_unchecked, project, Camera, PoseGradient, PoseParams, SkeletonModel};

/// Number of yaw angles tried when initializing a window.
pub const YAW_CANDIDATES: usize = 30;
/// Lower bound applied to the bone scale after every step.
pub const MIN_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Frames optimized jointly; windows do not overlap. The defaults have
    /// no temporal terms; see [`FitConfig::temporal`].
    pub window_size: usize,
    pub lambda_kpt: f64,
    pub lambda_msk: f64,
    pub lambda_pp: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    pub beta_g: f64,
    pub beta_p: f64,
    pub gm_sigma: f64,
    /// Mask weight during the first stage.
    pub stage1_lambda_msk: f64,
    pub use_median_filter: bool,
    pub median_window: usize,
    /// Share one bone scale across the window.
    pub common_size: bool,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub sharpness: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            window_size: 100,
            lambda_kpt: w.lambda_kpt,
            lambda_msk: w.lambda_msk,
            lambda_pp: w.lambda_pp,
            lambda_vel: 0.0,
            lambda_acc: 0.0,
            beta_g: w.beta_g,
            beta_p: w.beta_p,
            gm_sigma: w.gm_sigma,
            stage1_lambda_msk: 0.0,
            use_median_filter: false,
            median_window: 5,
            common_size: false,
            stage1_iters: 600,
            stage2_iters: 400,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            sharpness: SilhouetteConfig::default().sharpness,
        }
    }
}

impl FitConfig {
    /// Per-frame fitting without temporal terms or filtering.
    pub fn single_frame() -> Self {
        Self { window_size: 1, ..Self::default() }
    }

    /// Windowed fitting with velocity and acceleration terms at weight 100,
    /// the median filter and a shared bone scale.
    pub fn temporal() -> Self {
        Self { lambda_vel: 100.0, lambda_acc: 100.0, use_median_filter: true, common_size: true, ..Self::default() }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_kpt: self.lambda_kpt,
            lambda_msk: self.lambda_msk,
            lambda_pp: self.lambda_pp,
            lambda_vel: self.lambda_vel,
            lambda_acc: self.lambda_acc,
            beta_g: self.beta_g,
            beta_p: self.beta_p,
            gm_sigma: self.gm_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.window_size == 0 {
            return Err(Error::invalid("window_size", "must be at least 1"));
        }
        if !(self.stage1_lambda_msk >= 0.0) {
            return Err(Error::invalid("stage1_lambda_msk", "must be non-negative"));
        }
        if self.use_median_filter && self.median_window % 2 == 0 {
            return Err(Error::invalid("median_window", format!("must be odd, got {}", self.median_window)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("adam_beta", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon", "must be positive"));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::invalid("sharpness", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Flat parameter vector: per frame `κ(2), [σ], θg(3), θp`, and a trailing
/// shared `σ` when the scale is common.
struct Layout {
    frames: usize,
    dim: usize,
    common_size: bool,
}

impl Layout {
    fn stride(&self) -> usize {
        5 + self.dim + usize::from(!self.common_size)
    }

    fn len(&self) -> usize {
        self.frames * self.stride() + usize::from(self.common_size)
    }

    fn sigma_index(&self, frame: usize) -> usize {
        if self.common_size {
            self.frames * self.stride()
        } else {
            frame * self.stride() + 2
        }
    }

    fn rest_offset(&self) -> usize {
        if self.common_size {
            2
        } else {
            3
        }
    }

    fn pack(&self, poses: &[PoseParams], out: &mut [f64]) {
        let r = self.rest_offset();
        for (f, p) in poses.iter().enumerate() {
            let b = &mut out[f * self.stride()..(f + 1) * self.stride()];
            b[0] = p.kappa.x;
            b[1] = p.kappa.y;
            b[r..r + 3].copy_from_slice(p.theta_g.as_slice());
            b[r + 3..].copy_from_slice(&p.theta_p);
        }
        for (f, p) in poses.iter().enumerate() {
            out[self.sigma_index(f)] = p.sigma;
        }
        if self.common_size && !poses.is_empty() {
            out[self.sigma_index(0)] = poses.iter().map(|p| p.sigma).sum::<f64>() / poses.len() as f64;
        }
    }

    fn unpack(&self, flat: &[f64], poses: &mut [PoseParams]) {
        let r = self.rest_offset();
        for (f, p) in poses.iter_mut().enumerate() {
            let b = &flat[f * self.stride()..(f + 1) * self.stride()];
            p.kappa = Vector2::new(b[0], b[1]);
            p.theta_g = nalgebra::Vector3::new(b[r], b[r + 1], b[r + 2]);
            p.theta_p.copy_from_slice(&b[r + 3..]);
            p.sigma = flat[self.sigma_index(f)];
        }
    }

    fn pack_grad(&self, grads: &[PoseGradient], out: &mut [f64]) {
        let r = self.rest_offset();
        if self.common_size {
            out[self.sigma_index(0)] = 0.0;
        }
        for (f, g) in grads.iter().enumerate() {
            let b = &mut out[f * self.stride()..(f + 1) * self.stride()];
            b[0] = g.kappa.x;
            b[1] = g.kappa.y;
            b[r..r + 3].copy_from_slice(g.theta_g.as_slice());
            b[r + 3..].copy_from_slice(&g.theta_p);
        }
        for (f, g) in grads.iter().enumerate() {
            if self.common_size {
                out[self.sigma_index(f)] += g.sigma;
            } else {
                out[self.sigma_index(f)] = g.sigma;
            }
        }
    }

    fn clamp_sigma(&self, flat: &mut [f64]) {
        for f in 0..self.frames {
            let i = self.sigma_index(f);
            flat[i] = flat[i].max(MIN_SIGMA);
        }
    }
}

/// Result of the yaw sweep on one frame.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub pose: PoseParams,
    pub yaw: f64,
    /// Keypoint loss of every candidate, in sweep order.
    pub candidate_losses: Vec<f64>,
}

fn usable(k: &Keypoint) -> bool {
    k.confidence > 0.0 && k.x.is_finite() && k.y.is_finite()
}

fn has_usable_keypoints(obs: &ObservationFrame) -> bool {
    !obs.missing && obs.keypoints.iter().any(usable)
}

fn weighted_centroid<'a>(points: impl Iterator<Item = (Vector2<f64>, &'a Keypoint)>) -> Vector2<f64> {
    let (mut sum, mut w) = (Vector2::zeros(), 0.0);
    for (p, k) in points.filter(|(_, k)| usable(k)) {
        sum += p * k.confidence;
        w += k.confidence;
    }
    sum / w
}

/// Sets `κ` so that the confidence-weighted centroid of the projected model
/// keypoints lands on that of the detections. Non-finite detections are
/// ignored here; the objective reports them.
fn place(model: &SkeletonModel, camera: &Camera, pose: &mut PoseParams, obs: &ObservationFrame) -> Result<()> {
    let target = weighted_centroid(obs.keypoints.iter().map(|k| (k.position(), k)));
    pose.kappa = camera.kappa_for_pixel(target);
    // depth variation makes the shift slightly non-uniform; two passes suffice
    for _ in 0..2 {
        let projected = project(camera, &fk_unchecked(model, pose).keypoints)?;
        let current = weighted_centroid(projected.iter().copied().zip(&obs.keypoints));
        pose.kappa += (target - current) / camera.pixels_per_unit();
    }
    Ok(())
}

/// Tries [`YAW_CANDIDATES`] rotations of the rest pose about the viewing
/// axis, each placed on the detections, and keeps the one with the lowest
/// keypoint loss. Ties keep the earliest candidate.
pub fn initialize(model: &SkeletonModel, camera: &Camera, obs: &ObservationFrame, gm_sigma: f64) -> Result<Initialization> {
    obs.validate(model, camera.image_size)?;
    if !has_usable_keypoints(obs) {
        return Err(Error::Uninitializable { frame: obs.frame_index });
    }
    let mut best: Option<(f64, PoseParams, f64)> = None;
    let mut losses = Vec::with_capacity(YAW_CANDIDATES);
    for k in 0..YAW_CANDIDATES {
        let yaw = std::f64::consts::TAU * k as f64 / YAW_CANDIDATES as f64;
        let mut pose = model.rest_pose();
        pose.sigma = 1.0;
        pose.theta_g = nalgebra::Vector3::new(0.0, 0.0, yaw);
        place(model, camera, &mut pose, obs)?;
        let projected = project(camera, &fk_unchecked(model, &pose).keypoints)?;
        let loss = keypoint_loss(&projected, &obs.keypoints, gm_sigma)?;
        losses.push(loss);
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            best = Some((loss, pose, yaw));
        }
    }
    let (_, pose, yaw) = best.expect("at least one candidate");
    Ok(Initialization { pose, yaw, candidate_losses: losses })
}

/// Initial poses for a window: a yaw sweep on the first usable frame, then
/// each later frame copies the previous orientation and is placed on its
/// own detections. Frames before the first usable one copy its pose.
pub fn initialize_window(model: &SkeletonModel, camera: &Camera, observations: &[ObservationFrame], gm_sigma: f64) -> Result<Vec<PoseParams>> {
    let first =
        observations.iter().position(has_usable_keypoints).ok_or(Error::Uninitializable { frame: observations.first().map_or(0, |o| o.frame_index) })?;
    let init = initialize(model, camera, &observations[first], gm_sigma)?;
    let mut poses = vec![init.pose.clone(); observations.len()];
    for t in first + 1..observations.len() {
        let mut pose = model.rest_pose();
        pose.sigma = 1.0;
        pose.theta_g = poses[t - 1].theta_g;
        pose.kappa = poses[t - 1].kappa;
        if has_usable_keypoints(&observations[t]) {
            place(model, camera, &mut pose, &observations[t])?;
        }
        poses[t] = pose;
    }
    Ok(poses)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub frame_indices: Vec<i64>,
    pub poses: Vec<PoseParams>,
    pub initial_poses: Vec<PoseParams>,
    /// Model keypoints projected into each frame's crop space.
    pub projected_keypoints: Vec<Vec<Vector2<f64>>>,
    /// Objective value before every step, then once more at the end.
    pub loss_trace: Vec<f64>,
    /// Full objective (with the mask term) at the initial poses.
    pub initial_loss: f64,
    /// Full objective at the returned poses.
    pub final_loss: f64,
    pub final_terms: EnergyTerms,
}

impl FitResult {
    /// Projected keypoints mapped back to image pixels.
    pub fn image_keypoints(&self, observations: &[ObservationFrame]) -> Vec<Vec<Vector2<f64>>> {
        self.projected_keypoints.iter().zip(observations).map(|(kps, o)| kps.iter().map(|p| o.transform.to_image(*p)).collect()).collect()
    }
}

fn objective<'a>(model: &'a SkeletonModel, camera: &'a Camera, config: &FitConfig) -> Objective<'a> {
    let mut o = Objective::new(model, camera, config.weights());
    o.silhouette = SilhouetteConfig { sharpness: config.sharpness };
    o
}

/// Fits one window: optional median filtering, window initialization and
/// the two optimization stages.
pub fn fit_window(model: &SkeletonModel, camera: &Camera, observations: &[ObservationFrame], config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let filtered;
    let observations = if config.use_median_filter {
        filtered = filter_observations(observations, config.median_window)?;
        &filtered[..]
    } else {
        observations
    };
    let init = initialize_window(model, camera, observations, config.gm_sigma)?;
    optimize(model, camera, observations, config, init)
}

/// Like [`fit_window`] but starting from the given poses.
pub fn fit_window_from(
    model: &SkeletonModel,
    camera: &Camera,
    observations: &[ObservationFrame],
    config: &FitConfig,
    initial: Vec<PoseParams>,
) -> Result<FitResult> {
    config.validate()?;
    if config.use_median_filter {
        let filtered = filter_observations(observations, config.median_window)?;
        optimize(model, camera, &filtered, config, initial)
    } else {
        optimize(model, camera, observations, config, initial)
    }
}

fn optimize(model: &SkeletonModel, camera: &Camera, observations: &[ObservationFrame], config: &FitConfig, initial: Vec<PoseParams>) -> Result<FitResult> {
    camera.validate()?;
    if observations.is_empty() {
        return Err(Error::invalid("observations", "window is empty"));
    }
    Error::check_len("initial poses", observations.len(), initial.len())?;
    let obj = objective(model, camera, config);
    let layout = Layout { frames: observations.len(), dim: model.pose_dim(), common_size: config.common_size };
    let mut poses = initial.clone();
    let mut flat = vec![0.0; layout.len()];
    let mut grad = vec![0.0; layout.len()];
    layout.pack(&poses, &mut flat);
    layout.clamp_sigma(&mut flat);
    layout.unpack(&flat, &mut poses);
    let initial_loss = obj.value(&poses, observations, config.lambda_msk)?.total;

    let mut trace = Vec::with_capacity(config.stage1_iters + config.stage2_iters + 1);
    let mut iteration = 0;
    for (iters, mask_weight) in [(config.stage1_iters, config.stage1_lambda_msk), (config.stage2_iters, config.lambda_msk)] {
        let mut adam = Adam::new(layout.len(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        for _ in 0..iters {
            let eval = obj.evaluate(&poses, observations, mask_weight)?;
            if let Some(term) = eval.terms.non_finite_term() {
                return Err(Error::NonFinite { iteration, term: term.into() });
            }
            if !eval.gradient.iter().all(PoseGradient::is_finite) {
                return Err(Error::NonFinite { iteration, term: "gradient".into() });
            }
            trace.push(eval.terms.total);
            layout.pack_grad(&eval.gradient, &mut grad);
            adam.step(&mut flat, &grad);
            layout.clamp_sigma(&mut flat);
            layout.unpack(&flat, &mut poses);
            iteration += 1;
        }
    }

    let final_terms = obj.value(&poses, observations, config.lambda_msk)?;
    if let Some(term) = final_terms.non_finite_term() {
        return Err(Error::NonFinite { iteration, term: term.into() });
    }
    trace.push(final_terms.total);
    let projected_keypoints = poses.iter().map(|p| project(camera, &fk_unchecked(model, p).keypoints)).collect::<Result<_>>()?;
    Ok(FitResult {
        frame_indices: observations.iter().map(|o| o.frame_index).collect(),
        poses,
        initial_poses: initial,
        projected_keypoints,
        loss_trace: trace,
        initial_loss,
        final_loss: final_terms.total,
        final_terms,
    })
}

/// A whole track fitted window by window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackFit {
    pub windows: Vec<FitResult>,
}

impl TrackFit {
    pub fn poses(&self) -> impl Iterator<Item = &PoseParams> {
        self.windows.iter().flat_map(|w| &w.poses)
    }

    pub fn projected_keypoints(&self) -> impl Iterator<Item = &Vec<Vector2<f64>>> {
        self.windows.iter().flat_map(|w| &w.projected_keypoints)
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = i64> + '_ {
        self.windows.iter().flat_map(|w| w.frame_indices.iter().copied())
    }

    pub fn image_keypoints(&self, observations: &[ObservationFrame]) -> Vec<Vec<Vector2<f64>>> {
        self.projected_keypoints().zip(observations).map(|(kps, o)| kps.iter().map(|p| o.transform.to_image(*p)).collect()).collect()
    }
}

/// Splits a track into consecutive non-overlapping windows and fits them in
/// parallel. The median filter runs once over the whole track.
pub fn fit_track(model: &SkeletonModel, camera: &Camera, observations: &[ObservationFrame], config: &FitConfig) -> Result<TrackFit> {
    config.validate()?;
    let filtered;
    let observations = if config.use_median_filter {
        filtered = filter_observations(observations, config.median_window)?;
        &filtered[..]
    } else {
        observations
    };
    let per_window = FitConfig { use_median_filter: false, ..*config };
    let windows = observations.par_chunks(config.window_size).map(|w| fit_window(model, camera, w, &per_window)).collect::<Result<Vec<_>>>()?;
    Ok(TrackFit { windows })
}
