//! Velocity and acceleration regularizers over a window of poses.
//!
//! Both penalize the (non-squared) L2 norm of finite differences of the
//! global orientation and of the body pose, weighted by `beta_g` and
//! `beta_p`. The norm is smoothed as `sqrt(|v|² + ε²) - ε`, which is exactly
//! zero for a zero difference and has a finite gradient everywhere.

use crate::skeleton::{PoseGradient, PoseParams};

pub const SMOOTH_NORM_EPS: f64 = 1e-8;

#[inline]
fn smooth_norm(sq: f64) -> (f64, f64) {
    let n = (sq + SMOOTH_NORM_EPS * SMOOTH_NORM_EPS).sqrt();
    (n - SMOOTH_NORM_EPS, n)
}

/// Finite-difference stencils: first differences for velocity, second
/// differences for acceleration.
const VELOCITY: &[f64] = &[-1.0, 1.0];
const ACCELERATION: &[f64] = &[1.0, -2.0, 1.0];

fn difference_energy(poses: &[PoseParams], beta_g: f64, beta_p: f64, stencil: &[f64], mut grads: Option<(&mut [PoseGradient], f64)>) -> f64 {
    if poses.len() < stencil.len() {
        return 0.0;
    }
    let dim = poses[0].theta_p.len();
    let mut total = 0.0;
    let mut diff_p = vec![0.0; dim];
    for start in 0..=poses.len() - stencil.len() {
        let window = &poses[start..start + stencil.len()];
        let diff_g = window.iter().zip(stencil).fold(nalgebra::Vector3::zeros(), |acc, (p, w)| acc + p.theta_g * *w);
        diff_p.iter_mut().for_each(|v| *v = 0.0);
        for (p, w) in window.iter().zip(stencil) {
            for (d, t) in diff_p.iter_mut().zip(&p.theta_p) {
                *d += w * t;
            }
        }
        let (ng, raw_g) = smooth_norm(diff_g.norm_squared());
        let (np, raw_p) = smooth_norm(diff_p.iter().map(|v| v * v).sum());
        total += beta_g * ng + beta_p * np;

        if let Some((grads, scale)) = grads.as_mut() {
            let ug = diff_g * (*scale * beta_g / raw_g);
            let sp = *scale * beta_p / raw_p;
            for (k, w) in stencil.iter().enumerate() {
                let g = &mut grads[start + k];
                g.theta_g += ug * *w;
                for (gt, d) in g.theta_p.iter_mut().zip(&diff_p) {
                    *gt += w * sp * d;
                }
            }
        }
    }
    total
}

/// `Σ_k β_k Σ_i |θ_{k,i+1} - θ_{k,i}|`; zero for fewer than two poses.
pub fn velocity_loss(poses: &[PoseParams], beta_g: f64, beta_p: f64) -> f64 {
    difference_energy(poses, beta_g, beta_p, VELOCITY, None)
}

/// `Σ_k β_k Σ_j |θ'_{k,j+1} - θ'_{k,j}|` with `θ'` the consecutive
/// differences; zero for fewer than three poses.
pub fn acceleration_loss(poses: &[PoseParams], beta_g: f64, beta_p: f64) -> f64 {
    difference_energy(poses, beta_g, beta_p, ACCELERATION, None)
}

/// Velocity loss, accumulating `scale · ∂E/∂θ` into `grads`.
pub fn velocity_loss_grad(poses: &[PoseParams], beta_g: f64, beta_p: f64, scale: f64, grads: &mut [PoseGradient]) -> f64 {
    difference_energy(poses, beta_g, beta_p, VELOCITY, Some((grads, scale)))
}

/// Acceleration loss, accumulating `scale · ∂E/∂θ` into `grads`.
pub fn acceleration_loss_grad(poses: &[PoseParams], beta_g: f64, beta_p: f64, scale: f64, grads: &mut [PoseGradient]) -> f64 {
    difference_energy(poses, beta_g, beta_p, ACCELERATION, Some((grads, scale)))
}
