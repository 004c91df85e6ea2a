//! The TOML configuration file. Every section is optional; missing keys take
//! their defaults.
//!
//! ```toml
//! model = "bird.json"        # skeleton model, default: the bundled bird
//!
//! [fit]                      # every FitConfig field
//! window_size = 100
//! lambda_vel = 100.0
//!
//! [tracker]
//! iou_threshold = 0.1
//! max_misses = 5
//!
//! [crop]
//! pad = 40.0
//! dilation = 70
//! size = 256
//!
//! [camera]                   # the crop camera used for fitting
//! focal = 1500.0
//! fixed_depth = 10.0
//!
//! [synth]                    # the synthetic scene, see SceneSpec
//! birds = 2
//! frames = 100
//!
//! [synth.motion]             # see MotionSpec
//! noise_px = 3.0
//! ```

use std::path::{Path, PathBuf};

use birdfit::preprocess::CropConfig;
use birdfit::tracker::TrackerConfig;
use birdfit::{Camera, FitConfig, SkeletonModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::scene::SceneSpec;

/// Names a config file when `--config` is not given.
pub const CONFIG_ENV: &str = "BIRDFIT_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub focal: f64,
    pub fixed_depth: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let c = Camera::default();
        Self { focal: c.focal, fixed_depth: c.fixed_depth }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: Option<PathBuf>,
    pub fit: FitConfig,
    pub tracker: TrackerConfig,
    pub crop: CropConfig,
    pub camera: CameraConfig,
    pub synth: SceneSpec,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim().replace('\n', " ")))
    }

    /// Reads `path`, or the file named by [`CONFIG_ENV`], or falls back to
    /// the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    /// Square camera matching the crop size.
    pub fn crop_camera(&self) -> Camera {
        let s = self.crop.size;
        Camera { focal: self.camera.focal, principal: [s as f64 / 2.0, s as f64 / 2.0], fixed_depth: self.camera.fixed_depth, image_size: (s, s) }
    }

    /// The model named by `over`, else by the config, else the bundled bird.
    pub fn load_model(&self, over: Option<&Path>) -> Result<SkeletonModel> {
        match over.or(self.model.as_deref()) {
            Some(p) => Ok(SkeletonModel::from_json(&std::fs::read_to_string(p)?)?),
            None => Ok(SkeletonModel::default_bird()),
        }
    }
}
