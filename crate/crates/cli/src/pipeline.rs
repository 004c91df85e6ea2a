//! The stages behind `track`, `preprocess`, `fit` and `eval`.

use std::collections::BTreeMap;

use birdfit::fitter::fit_track;
use birdfit::io::{Detections, GroundTruth, ObservationsFile, TrackRow, FORMAT_VERSION};
use birdfit::losses::EnergyTerms;
use birdfit::metrics::{position_errors, velocity_errors, ErrorSum, GtKeypoint};
use birdfit::preprocess::{normalize_crop, CropConfig, NormalizedCrop};
use birdfit::tracker::{track_all, Track, TrackerConfig};
use birdfit::{BBox, Camera, CropTransform, FitConfig, Keypoint, Mask, ObservationFrame, PoseParams, SkeletonModel};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Tracks every detection box. Frames between the first and last detected
/// frame are stepped even when empty, so misses accumulate across them.
pub fn track_detections(detections: &Detections, config: TrackerConfig) -> Result<Vec<Track>> {
    let (Some(&first), Some(&last)) = (detections.frames.keys().next(), detections.frames.keys().next_back()) else {
        return Ok(Vec::new());
    };
    let boxes: Vec<(i64, Vec<BBox>)> =
        (first..=last).map(|f| (f, detections.frames.get(&f).map(|ds| ds.iter().map(|d| d.bbox).collect()).unwrap_or_default())).collect();
    Ok(track_all(boxes.iter().map(|(f, b)| (*f, &b[..])), config)?)
}

/// Crops one track. Frames inside the track without a detection become
/// missing frames that reuse the previous crop transform and box.
pub fn build_track(detections: &Detections, rows: &[TrackRow], crop: &CropConfig) -> Result<(ObservationsFile, Vec<Option<NormalizedCrop>>)> {
    let track_id = rows.first().map(|r| r.track_id).ok_or_else(|| CliError::Usage("empty track".into()))?;
    let by_frame: BTreeMap<i64, &TrackRow> = rows.iter().map(|r| (r.frame, r)).collect();
    let (first, last) = (rows[0].frame, rows[rows.len() - 1].frame);
    let mut frames: Vec<ObservationFrame> = Vec::new();
    let mut bird_ids = Vec::new();
    let mut crops = Vec::new();
    for f in first..=last {
        match by_frame.get(&f) {
            Some(row) => {
                let det =
                    detections.frames.get(&f).and_then(|ds| ds.iter().find(|d| d.bird_id == row.bird_id)).ok_or_else(|| {
                        birdfit::Error::Format(format!("track {track_id} refers to bird {} in frame {f}, which has no detection", row.bird_id))
                    })?;
                let c = normalize_crop(detections.image_size, &row.bbox(), &det.mask, &det.keypoints, f, crop)?;
                frames.push(c.observation.clone());
                bird_ids.push(Some(row.bird_id));
                crops.push(Some(c));
            }
            None => {
                let prev = frames.last().expect("a track starts with a detection");
                let k = prev.keypoints.len();
                frames.push(ObservationFrame {
                    frame_index: f,
                    keypoints: vec![Keypoint::new(0.0, 0.0, 0.0); k],
                    mask: Mask::new(crop.size, crop.size),
                    bbox: prev.bbox,
                    transform: prev.transform,
                    missing: true,
                });
                bird_ids.push(None);
                crops.push(None);
            }
        }
    }
    let file = ObservationsFile { version: FORMAT_VERSION, track_id, image_size: detections.image_size, bird_ids, frames };
    Ok((file, crops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFrame {
    pub frame_index: i64,
    pub bird_id: Option<u64>,
    pub missing: bool,
    pub bbox: BBox,
    pub transform: CropTransform,
    pub pose: PoseParams,
    /// Crop pixels.
    pub projected_keypoints: Vec<[f64; 2]>,
    /// Image pixels.
    pub image_keypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub first_frame: i64,
    pub frames: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_terms: EnergyTerms,
    pub loss_trace: Vec<f64>,
}

/// Output of `fit` for one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub version: u32,
    pub track_id: u64,
    pub image_size: (usize, usize),
    pub config: FitConfig,
    pub camera: Camera,
    pub frames: Vec<FitFrame>,
    pub windows: Vec<WindowSummary>,
}

impl FitFile {
    pub fn check_version(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(birdfit::Error::Format(format!("unsupported fit version {}", self.version)).into());
        }
        Ok(())
    }
}

fn pair(p: Vector2<f64>) -> [f64; 2] {
    [p.x, p.y]
}

pub fn fit_observations(model: &SkeletonModel, camera: &Camera, obs: &ObservationsFile, config: &FitConfig) -> Result<FitFile> {
    obs.check_version()?;
    let fit = fit_track(model, camera, &obs.frames, config)?;
    let frames = fit
        .poses()
        .zip(fit.projected_keypoints())
        .zip(obs.frames.iter().zip(&obs.bird_ids))
        .map(|((pose, kps), (o, bird))| FitFrame {
            frame_index: o.frame_index,
            bird_id: *bird,
            missing: o.missing,
            bbox: o.bbox,
            transform: o.transform,
            pose: pose.clone(),
            projected_keypoints: kps.iter().copied().map(pair).collect(),
            image_keypoints: kps.iter().map(|p| pair(o.transform.to_image(*p))).collect(),
        })
        .collect();
    let windows = fit
        .windows
        .iter()
        .map(|w| WindowSummary {
            first_frame: w.frame_indices[0],
            frames: w.frame_indices.len(),
            initial_loss: w.initial_loss,
            final_loss: w.final_loss,
            final_terms: w.final_terms,
            loss_trace: w.loss_trace.clone(),
        })
        .collect();
    Ok(FitFile { version: FORMAT_VERSION, track_id: obs.track_id, image_size: obs.image_size, config: *config, camera: *camera, frames, windows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub track_id: u64,
    /// Ground-truth bird the track was matched to.
    pub bird_id: Option<u64>,
    pub frames: usize,
    /// Frames that have ground truth for the matched bird.
    pub evaluated_frames: usize,
    pub me_p: Option<f64>,
    pub me_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pooled over every evaluated keypoint of every track.
    pub me_p: f64,
    pub me_v: Option<f64>,
    pub tracks: Vec<TrackMetrics>,
}

fn as_vec(p: &[f64; 2]) -> Vector2<f64> {
    Vector2::new(p[0], p[1])
}

/// Mean image distance to each ground-truth bird over shared frames; the
/// nearest bird wins, ties going to the lower id.
fn associate(fit: &FitFile, gt: &GroundTruth) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    for (&bird, frames) in gt {
        let (mut sum, mut n) = (0.0, 0usize);
        for f in &fit.frames {
            let Some(g) = frames.get(&f.frame_index) else { continue };
            for (p, gk) in f.image_keypoints.iter().zip(g) {
                if gk.visible {
                    sum += (as_vec(p) - gk.position()).norm();
                    n += 1;
                }
            }
        }
        if n > 0 {
            let mean = sum / n as f64;
            if best.map_or(true, |(b, _)| mean < b) {
                best = Some((mean, bird));
            }
        }
    }
    best.map(|(_, b)| b)
}

type Segment = (Vec<Vec<Vector2<f64>>>, Vec<Vec<GtKeypoint>>, Vec<BBox>);

// Runs of consecutive frames that have ground truth.
fn segments(fit: &FitFile, gt: &BTreeMap<i64, Vec<GtKeypoint>>) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut prev: Option<i64> = None;
    for f in &fit.frames {
        let Some(g) = gt.get(&f.frame_index) else {
            prev = None;
            continue;
        };
        if prev != Some(f.frame_index - 1) {
            out.push(Default::default());
        }
        let seg = out.last_mut().expect("segment started");
        seg.0.push(f.image_keypoints.iter().map(as_vec).collect());
        seg.1.push(g.clone());
        seg.2.push(f.bbox);
        prev = Some(f.frame_index);
    }
    out
}

/// Image-space metrics of every fitted track against the ground truth,
/// normalized by each frame's detection box.
pub fn evaluate(fits: &[FitFile], gt: &GroundTruth) -> Result<EvalReport> {
    let (mut pos_all, mut vel_all) = (ErrorSum::default(), ErrorSum::default());
    let mut tracks = Vec::with_capacity(fits.len());
    for fit in fits {
        let bird = associate(fit, gt);
        let (mut pos, mut vel) = (ErrorSum::default(), ErrorSum::default());
        let mut evaluated = 0;
        if let Some(b) = bird {
            for (pred, g, boxes) in segments(fit, &gt[&b]) {
                evaluated += pred.len();
                pos.add(position_errors(&pred, &g, &boxes)?);
                vel.add(velocity_errors(&pred, &g, &boxes)?);
            }
        }
        pos_all.add(pos);
        vel_all.add(vel);
        tracks.push(TrackMetrics {
            track_id: fit.track_id,
            bird_id: bird,
            frames: fit.frames.len(),
            evaluated_frames: evaluated,
            me_p: pos.rms(),
            me_v: vel.rms(),
        });
    }
    Ok(EvalReport { me_p: pos_all.rms().ok_or(birdfit::Error::NoVisibleKeypoints)?, me_v: vel_all.rms(), tracks })
}
