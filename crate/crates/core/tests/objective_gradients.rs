use birdfit::losses::{total_objective, LossWeights, Objective, Stage};
use birdfit::skeleton::{Camera, PoseGradient, PoseParams, SkeletonModel};
use birdfit::synthgen::{generate_trajectory, MotionSpec};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flatten(poses: &[PoseParams]) -> Vec<f64> {
    poses
        .iter()
        .flat_map(|p| p.kappa.iter().copied().chain([p.sigma]).chain(p.theta_g.iter().copied()).chain(p.theta_p.iter().copied()).collect::<Vec<_>>())
        .collect()
}

fn flatten_grad(grads: &[PoseGradient]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.kappa.iter().copied().chain([g.sigma]).chain(g.theta_g.iter().copied()).chain(g.theta_p.iter().copied()).collect::<Vec<_>>())
        .collect()
}

fn unflatten(flat: &[f64], template: &[PoseParams]) -> Vec<PoseParams> {
    let stride = flat.len() / template.len();
    template
        .iter()
        .enumerate()
        .map(|(f, t)| {
            let b = &flat[f * stride..(f + 1) * stride];
            PoseParams { kappa: Vector2::new(b[0], b[1]), sigma: b[2], theta_g: Vector3::new(b[3], b[4], b[5]), theta_p: b[6..6 + t.theta_p.len()].to_vec() }
        })
        .collect()
}

// Noisy observations of one random trajectory, evaluated at a perturbed copy
// of the true poses so every residual is non-zero.
fn random_case(seed: u64) -> (Vec<PoseParams>, Vec<birdfit::losses::ObservationFrame>) {
    let model = SkeletonModel::default_bird();
    let camera = Camera::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MotionSpec { base_yaw: rng.gen_range(0.0..std::f64::consts::TAU), smoothing: 3, ..MotionSpec::default() };
    let seq = generate_trajectory(&model, &camera, 3, &spec, seed).unwrap();
    let poses = seq
        .poses
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.kappa += Vector2::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
            q.sigma *= rng.gen_range(0.9..1.1);
            q.theta_g += Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            for v in &mut q.theta_p {
                *v += rng.gen_range(-0.1..0.1);
            }
            q
        })
        .collect();
    (poses, seq.observations)
}

fn relative_gradient_error(seed: u64, weights: &LossWeights, stage: Stage) -> f64 {
    let model = SkeletonModel::default_bird();
    let camera = Camera::default();
    let (poses, obs) = random_case(seed);
    let eval = total_objective(&poses, &obs, &model, &camera, weights, stage).unwrap();
    let analytic = flatten_grad(&eval.gradient);
    let objective = Objective::new(&model, &camera, *weights);
    let mask_weight = stage.mask_weight(weights);
    let x = flatten(&poses);
    let h = 1e-6;
    let mut diff = 0.0;
    let mut norm = 0.0;
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi[i] += h;
        let mut lo = x.clone();
        lo[i] -= h;
        let f_hi = objective.value(&unflatten(&hi, &poses), &obs, mask_weight).unwrap().total;
        let f_lo = objective.value(&unflatten(&lo, &poses), &obs, mask_weight).unwrap().total;
        let fd = (f_hi - f_lo) / (2.0 * h);
        diff += (fd - analytic[i]).powi(2);
        norm += fd * fd;
    }
    diff.sqrt() / norm.sqrt()
}

#[test]
fn value_and_gradient_agree_on_total() {
    let model = SkeletonModel::default_bird();
    let camera = Camera::default();
    let (poses, obs) = random_case(3);
    let w = LossWeights { lambda_vel: 100.0, lambda_acc: 100.0, ..LossWeights::default() };
    let eval = total_objective(&poses, &obs, &model, &camera, &w, Stage::WithMask).unwrap();
    let value = Objective::new(&model, &camera, w).value(&poses, &obs, w.lambda_msk).unwrap();
    assert!((eval.terms.total - value.total).abs() <= 1e-9 * value.total);
    assert!((eval.terms.mask - value.mask).abs() <= 1e-12);
    assert!(eval.terms.velocity > 0.0 && eval.terms.acceleration > 0.0 && eval.terms.mask > 0.0);
}

#[test]
fn keypoint_stage_gradient_matches_finite_differences() {
    let w = LossWeights { lambda_vel: 100.0, lambda_acc: 100.0, ..LossWeights::default() };
    for seed in 0..5 {
        let err = relative_gradient_error(seed, &w, Stage::Keypoints);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn mask_stage_gradient_matches_finite_differences() {
    // the mask term alone, so its gradient is not swamped by the keypoints
    let w = LossWeights { lambda_kpt: 0.0, lambda_pp: 0.0, lambda_msk: 1.0, ..LossWeights::default() };
    for seed in 10..13 {
        let err = relative_gradient_error(seed, &w, Stage::WithMask);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn missing_frames_contribute_prior_only() {
    let model = SkeletonModel::default_bird();
    let camera = Camera::default();
    let (poses, mut obs) = random_case(4);
    for o in &mut obs {
        o.missing = true;
    }
    let w = LossWeights::default();
    let eval = total_objective(&poses, &obs, &model, &camera, &w, Stage::WithMask).unwrap();
    assert_eq!(eval.terms.keypoint, 0.0);
    assert_eq!(eval.terms.mask, 0.0);
    for g in &eval.gradient {
        assert_eq!(g.kappa, Vector2::zeros());
        assert_eq!(g.sigma, 0.0);
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let model = SkeletonModel::default_bird();
    let camera = Camera::default();
    let (poses, obs) = random_case(5);
    let err = total_objective(&poses[..2], &obs, &model, &camera, &LossWeights::default(), Stage::Keypoints).unwrap_err();
    assert!(matches!(err, birdfit::Error::DimensionMismatch { field: "observations", .. }));
}
