use birdfit::fitter::{fit_track, fit_window, fit_window_from, initialize, FitConfig};
use birdfit::skeleton::{Camera, SkeletonModel};
use birdfit::synthgen::{generate_trajectory, MotionSpec};
use birdfit::Error;

fn quick(cfg: FitConfig) -> FitConfig {
    FitConfig { stage1_iters: 120, stage2_iters: 10, ..cfg }
}

fn rms_px(fit: &birdfit::FitResult, gt: &[Vec<birdfit::metrics::GtKeypoint>]) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for (p, g) in fit.projected_keypoints.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            se += (a - b.position()).norm_squared();
            n += 1.0;
        }
    }
    (se / n).sqrt()
}

#[test]
fn rest_pose_at_yaw_zero_selects_zero() {
    let model = SkeletonModel::default_bird();
    let seq = generate_trajectory(&model, &Camera::default(), 1, &MotionSpec::still(), 0).unwrap();
    let init = initialize(&model, &Camera::default(), &seq.observations[0], 50.0).unwrap();
    assert_eq!(init.yaw, 0.0);
    assert_eq!(init.candidate_losses.len(), 30);
}

#[test]
fn yaw_ninety_is_found_within_grid_step() {
    let model = SkeletonModel::default_bird();
    let spec = MotionSpec { base_yaw: std::f64::consts::FRAC_PI_2, ..MotionSpec::still() };
    let seq = generate_trajectory(&model, &Camera::default(), 1, &spec, 0).unwrap();
    let init = initialize(&model, &Camera::default(), &seq.observations[0], 50.0).unwrap();
    assert!((init.yaw - std::f64::consts::FRAC_PI_2).abs() <= 12f64.to_radians() + 1e-12);
}

#[test]
fn noiseless_short_sequence_is_recovered() {
    let model = SkeletonModel::default_bird();
    let spec = MotionSpec { noise_px: 0.0, outlier_prob: 0.0, confidence: (1.0, 1.0), ..MotionSpec::default() };
    let seq = generate_trajectory(&model, &Camera::default(), 6, &spec, 21).unwrap();
    let cfg = FitConfig { stage2_iters: 50, ..FitConfig::default() };
    let fit = fit_window(&model, &Camera::default(), &seq.observations, &cfg).unwrap();
    let rms = rms_px(&fit, &seq.ground_truth);
    assert!(rms < 2.0, "{rms}");
    assert!(fit.final_loss < fit.initial_loss);
    assert!(fit.loss_trace.iter().all(|v| v.is_finite()));
    assert_eq!(fit.loss_trace.len(), cfg.stage1_iters + cfg.stage2_iters + 1);
}

#[test]
fn common_size_shares_sigma_bitwise() {
    let model = SkeletonModel::default_bird();
    let seq = generate_trajectory(&model, &Camera::default(), 5, &MotionSpec::default(), 2).unwrap();
    let cfg = quick(FitConfig::temporal());
    let fit = fit_window(&model, &Camera::default(), &seq.observations, &cfg).unwrap();
    let s0 = fit.poses[0].sigma.to_bits();
    assert!(fit.poses.iter().all(|p| p.sigma.to_bits() == s0));
    assert_ne!(fit.poses[0].sigma, 1.0);
}

#[test]
fn fitting_is_deterministic() {
    let model = SkeletonModel::default_bird();
    let seq = generate_trajectory(&model, &Camera::default(), 5, &MotionSpec::default(), 9).unwrap();
    let cfg = quick(FitConfig::temporal());
    let a = fit_window(&model, &Camera::default(), &seq.observations, &cfg).unwrap();
    let b = fit_window(&model, &Camera::default(), &seq.observations, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn without_temporal_terms_frames_decouple() {
    let model = SkeletonModel::default_bird();
    let cam = Camera::default();
    let seq = generate_trajectory(&model, &cam, 4, &MotionSpec::default(), 4).unwrap();
    let cfg = quick(FitConfig { window_size: 4, ..FitConfig::default() });
    let joint = fit_window(&model, &cam, &seq.observations, &cfg).unwrap();
    for t in 0..4 {
        let single = fit_window_from(&model, &cam, &seq.observations[t..t + 1], &cfg, vec![joint.initial_poses[t].clone()]).unwrap();
        let single_loss = single.final_terms.total;
        let joint_loss = {
            let obj = birdfit::losses::Objective::new(&model, &cam, cfg.weights());
            obj.value(&joint.poses[t..t + 1], &seq.observations[t..t + 1], cfg.lambda_msk).unwrap().total
        };
        assert!((single_loss - joint_loss).abs() <= 1e-6 * joint_loss, "frame {t}: {single_loss} vs {joint_loss}");
    }
}

#[test]
fn non_finite_keypoint_aborts_with_term() {
    let model = SkeletonModel::default_bird();
    let mut seq = generate_trajectory(&model, &Camera::default(), 2, &MotionSpec::default(), 1).unwrap();
    seq.observations[1].keypoints[3].x = f64::NAN;
    let err = fit_window(&model, &Camera::default(), &seq.observations, &quick(FitConfig::default())).unwrap_err();
    match err {
        Error::NonFinite { iteration, term } => {
            assert_eq!(iteration, 0);
            assert_eq!(term, "keypoint");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn track_is_split_into_windows() {
    let model = SkeletonModel::default_bird();
    let seq = generate_trajectory(&model, &Camera::default(), 7, &MotionSpec::default(), 3).unwrap();
    let cfg = FitConfig { window_size: 3, stage1_iters: 20, stage2_iters: 2, ..FitConfig::temporal() };
    let fit = fit_track(&model, &Camera::default(), &seq.observations, &cfg).unwrap();
    assert_eq!(fit.windows.iter().map(|w| w.poses.len()).collect::<Vec<_>>(), vec![3, 3, 1]);
    assert_eq!(fit.frame_indices().collect::<Vec<_>>(), (0..7).collect::<Vec<i64>>());
}

#[test]
fn missing_frames_are_bridged() {
    let model = SkeletonModel::default_bird();
    let mut seq = generate_trajectory(&model, &Camera::default(), 5, &MotionSpec::default(), 6).unwrap();
    seq.observations[0].missing = true;
    seq.observations[2].missing = true;
    let fit = fit_window(&model, &Camera::default(), &seq.observations, &quick(FitConfig::temporal())).unwrap();
    assert_eq!(fit.poses.len(), 5);
    assert!(fit.final_loss.is_finite());
}
