use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::temporal::{acceleration_loss_grad, velocity_loss_grad};
use super::{keypoint_loss_grad, pose_prior_loss_grad, LossWeights, ObservationFrame};
use crate::error::{Error, Result};
use crate::silhouette::{capsules_backward, project_capsules, render_and_backprop, render_and_reduce, SilhouetteConfig};
use crate::skeleton::{fk_backward, fk_unchecked, project, project_backward, Camera, PoseGradient, PoseParams, SkeletonModel};

/// Optimization stage: the first fits keypoints, the second adds the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Keypoints,
    WithMask,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Keypoints),
            2 => Ok(Stage::WithMask),
            _ => Err(Error::invalid("stage", format!("must be 1 or 2, got {n}"))),
        }
    }

    pub fn mask_weight(&self, weights: &LossWeights) -> f64 {
        match self {
            Stage::Keypoints => 0.0,
            Stage::WithMask => weights.lambda_msk,
        }
    }
}

/// Unweighted energy terms summed over the window, and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub keypoint: f64,
    pub mask: f64,
    pub prior: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub total: f64,
}

impl EnergyTerms {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("keypoint", self.keypoint),
            ("mask", self.mask),
            ("prior", self.prior),
            ("velocity", self.velocity),
            ("acceleration", self.acceleration),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: EnergyTerms,
    /// One gradient per frame.
    pub gradient: Vec<PoseGradient>,
}

#[derive(Default)]
struct FrameTerms {
    keypoint: f64,
    mask: f64,
    prior: f64,
}

/// The combined objective over a window of frames.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a SkeletonModel,
    pub camera: &'a Camera,
    pub weights: LossWeights,
    pub silhouette: SilhouetteConfig,
}

impl<'a> Objective<'a> {
    pub fn new(model: &'a SkeletonModel, camera: &'a Camera, weights: LossWeights) -> Self {
        Self { model, camera, weights, silhouette: SilhouetteConfig::default() }
    }

    fn check(&self, poses: &[PoseParams], observations: &[ObservationFrame]) -> Result<()> {
        Error::check_len("observations", poses.len(), observations.len())?;
        self.weights.validate()?;
        if !(self.silhouette.sharpness > 0.0) {
            return Err(Error::invalid("sharpness", format!("must be positive, got {}", self.silhouette.sharpness)));
        }
        for (pose, obs) in poses.iter().zip(observations) {
            self.model.check_pose(pose)?;
            obs.validate(self.model, self.camera.image_size)?;
        }
        Ok(())
    }

    /// Energy only.
    pub fn value(&self, poses: &[PoseParams], observations: &[ObservationFrame], mask_weight: f64) -> Result<EnergyTerms> {
        self.check(poses, observations)?;
        let frames: Vec<Result<FrameTerms>> = poses.par_iter().zip(observations).map(|(pose, obs)| self.frame_value(pose, obs, mask_weight)).collect();
        let mut terms = EnergyTerms::default();
        for f in frames {
            self.accumulate(&mut terms, &f?, mask_weight);
        }
        terms.velocity = super::velocity_loss(poses, self.weights.beta_g, self.weights.beta_p);
        terms.acceleration = super::acceleration_loss(poses, self.weights.beta_g, self.weights.beta_p);
        terms.total += self.weights.lambda_vel * terms.velocity + self.weights.lambda_acc * terms.acceleration;
        Ok(terms)
    }

    /// Energy and its gradient with respect to every frame's parameters.
    pub fn evaluate(&self, poses: &[PoseParams], observations: &[ObservationFrame], mask_weight: f64) -> Result<Evaluation> {
        self.check(poses, observations)?;
        let frames: Vec<Result<(FrameTerms, PoseGradient)>> =
            poses.par_iter().zip(observations).map(|(pose, obs)| self.frame_gradient(pose, obs, mask_weight)).collect();
        let mut terms = EnergyTerms::default();
        let mut gradient = Vec::with_capacity(poses.len());
        for f in frames {
            let (t, g) = f?;
            self.accumulate(&mut terms, &t, mask_weight);
            gradient.push(g);
        }
        let w = &self.weights;
        terms.velocity = velocity_loss_grad(poses, w.beta_g, w.beta_p, w.lambda_vel, &mut gradient);
        terms.acceleration = acceleration_loss_grad(poses, w.beta_g, w.beta_p, w.lambda_acc, &mut gradient);
        terms.total += w.lambda_vel * terms.velocity + w.lambda_acc * terms.acceleration;
        Ok(Evaluation { terms, gradient })
    }

    fn accumulate(&self, terms: &mut EnergyTerms, f: &FrameTerms, mask_weight: f64) {
        terms.keypoint += f.keypoint;
        terms.mask += f.mask;
        terms.prior += f.prior;
        terms.total += self.weights.lambda_kpt * f.keypoint + mask_weight * f.mask + self.weights.lambda_pp * f.prior;
    }

    fn frame_value(&self, pose: &PoseParams, obs: &ObservationFrame, mask_weight: f64) -> Result<FrameTerms> {
        let posed = fk_unchecked(self.model, pose);
        let (prior, _) = pose_prior_loss_grad(&pose.theta_p, self.model);
        let mut out = FrameTerms { prior, ..Default::default() };
        if obs.missing {
            return Ok(out);
        }
        let projected = project(self.camera, &posed.keypoints)?;
        out.keypoint = super::keypoint_loss(&projected, &obs.keypoints, self.weights.gm_sigma)?;
        if mask_weight > 0.0 {
            project(self.camera, &posed.joints)?;
            let capsules = project_capsules(self.model, &posed, pose.sigma, self.camera);
            let (w, h) = self.camera.image_size;
            let n = (w * h) as f64;
            let target = obs.mask.data();
            let mut target_visited = 0usize;
            let mask = render_and_reduce(&capsules, w, h, self.silhouette.sharpness, |i, s| {
                let t = target[i];
                target_visited += usize::from(t);
                (s - if t { 1.0 } else { 0.0 }).abs() / n
            });
            out.mask = mask + (obs.mask.count() - target_visited) as f64 / n;
        }
        Ok(out)
    }

    fn frame_gradient(&self, pose: &PoseParams, obs: &ObservationFrame, mask_weight: f64) -> Result<(FrameTerms, PoseGradient)> {
        let posed = fk_unchecked(self.model, pose);
        let (prior, prior_grad) = pose_prior_loss_grad(&pose.theta_p, self.model);
        let mut out = FrameTerms { prior, ..Default::default() };
        if obs.missing {
            let mut grad = PoseGradient::zeros(self.model.pose_dim());
            for (g, p) in grad.theta_p.iter_mut().zip(prior_grad.iter()) {
                *g = self.weights.lambda_pp * p;
            }
            return Ok((out, grad));
        }

        let projected = project(self.camera, &posed.keypoints)?;
        let (kpt, grad_2d) = keypoint_loss_grad(&projected, &obs.keypoints, self.weights.gm_sigma)?;
        out.keypoint = kpt;
        let lambda_kpt = self.weights.lambda_kpt;
        let grad_kp: Vec<_> = posed.keypoints.iter().zip(&grad_2d).map(|(p, g)| project_backward(self.camera, p, &(g * lambda_kpt))).collect();
        let mut grad = fk_backward(self.model, pose, &posed, &[], &grad_kp);

        if mask_weight > 0.0 {
            project(self.camera, &posed.joints)?;
            let capsules = project_capsules(self.model, &posed, pose.sigma, self.camera);
            let (w, h) = self.camera.image_size;
            let n = (w * h) as f64;
            let target = obs.mask.data();
            // unvisited pixels render as 0 and cost 1/n each where the target is set
            let mut target_visited = 0usize;
            let (mask, caps_grad) = render_and_backprop(&capsules, w, h, self.silhouette.sharpness, |i, s| {
                let t = target[i];
                target_visited += usize::from(t);
                let diff = s - if t { 1.0 } else { 0.0 };
                (diff.abs() / n, mask_weight * diff.signum() / n)
            });
            out.mask = mask + (obs.mask.count() - target_visited) as f64 / n;
            grad.add_scaled(&capsules_backward(self.model, pose, &posed, self.camera, &caps_grad), 1.0);
        }

        for (g, p) in grad.theta_p.iter_mut().zip(prior_grad.iter()) {
            *g += self.weights.lambda_pp * p;
        }
        Ok((out, grad))
    }
}

/// Combined window objective and its gradient, with the default silhouette
/// settings. Stage 1 omits the mask term.
pub fn total_objective(
    poses: &[PoseParams],
    observations: &[ObservationFrame],
    model: &SkeletonModel,
    camera: &Camera,
    weights: &LossWeights,
    stage: Stage,
) -> Result<Evaluation> {
    Objective::new(model, camera, *weights).evaluate(poses, observations, stage.mask_weight(weights))
}
