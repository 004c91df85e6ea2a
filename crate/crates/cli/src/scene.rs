//! A synthetic multi-bird video: several independent trajectories seen by one
//! image-space camera, written in the same formats the real pipeline reads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use birdfit::io::{Detection, Detections, GroundTruth};
use birdfit::silhouette::{render_soft_silhouette, SilhouetteConfig};
use birdfit::synthgen::{generate_trajectory, MotionSpec};
use birdfit::{Camera, PoseParams, SkeletonModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub birds: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub fixed_depth: f64,
    /// Probability that a visible bird has no detection in a frame.
    pub drop_prob: f64,
    /// Per-bird motion. `center` and `base_yaw` are drawn per bird.
    pub motion: MotionSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { birds: 2, frames: 100, width: 640, height: 480, focal: 1500.0, fixed_depth: 15.0, drop_prob: 0.0, motion: MotionSpec::default() }
    }
}

impl SceneSpec {
    pub fn camera(&self) -> Camera {
        Camera {
            focal: self.focal,
            principal: [self.width as f64 / 2.0, self.height as f64 / 2.0],
            fixed_depth: self.fixed_depth,
            image_size: (self.width, self.height),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(CliError::Usage("scene width and height must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(CliError::Usage(format!("drop_prob must lie in [0, 1], got {}", self.drop_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub camera: Camera,
    pub detections: Detections,
    pub ground_truth: GroundTruth,
    /// True poses keyed by bird id.
    pub poses: BTreeMap<u64, Vec<PoseParams>>,
}

/// Birds are spread evenly across the image width with a random yaw each.
/// Ground truth covers every frame; detections skip empty masks and dropped
/// frames. Detection bird ids equal ground-truth bird ids.
pub fn synthesize(model: &SkeletonModel, spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let camera = spec.camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut detections = Detections { image_size: (spec.width, spec.height), frames: BTreeMap::new() };
    let mut ground_truth = GroundTruth::new();
    let mut poses = BTreeMap::new();
    for b in 0..spec.birds {
        let bird = b as u64;
        let x = spec.width as f64 * (b + 1) as f64 / (spec.birds + 1) as f64;
        let y = spec.height as f64 * (0.5 + rng.gen_range(-0.1..0.1));
        let motion = MotionSpec { center: Some([x, y]), base_yaw: rng.gen_range(0.0..std::f64::consts::TAU), ..spec.motion.clone() };
        let seq = generate_trajectory(model, &camera, spec.frames, &motion, rng.gen())?;
        let gt = ground_truth.entry(bird).or_default();
        for (obs, g) in seq.observations.into_iter().zip(seq.ground_truth) {
            gt.insert(obs.frame_index, g);
            let dropped = spec.drop_prob > 0.0 && rng.gen_bool(spec.drop_prob);
            if obs.missing || dropped {
                continue;
            }
            detections.frames.entry(obs.frame_index).or_default().push(Detection { bird_id: bird, keypoints: obs.keypoints, mask: obs.mask, bbox: obs.bbox });
        }
        poses.insert(bird, seq.poses);
    }
    Ok(Scene { camera, detections, ground_truth, poses })
}

pub fn frame_path(dir: &Path, frame: i64) -> PathBuf {
    dir.join(format!("frame_{frame:06}.png"))
}

/// Grayscale frames: a dark background with every bird's silhouette drawn
/// bright. Returns the written paths.
pub fn write_frames(scene: &Scene, model: &SkeletonModel, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = scene.camera.image_size;
    let frames = scene.poses.values().map(Vec::len).max().unwrap_or(0);
    let sharpness = SilhouetteConfig::default().sharpness;
    let mut written = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut occupancy = vec![0.0f64; w * h];
        for poses in scene.poses.values() {
            let s = render_soft_silhouette(model, &poses[t], &scene.camera, sharpness)?;
            for (o, v) in occupancy.iter_mut().zip(&s.values) {
                *o = o.max(*v);
            }
        }
        let pixels: Vec<u8> = occupancy.iter().map(|v| (30.0 + 200.0 * v).round() as u8).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size");
        let path = frame_path(dir, t as i64);
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
