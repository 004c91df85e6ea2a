//! Overlays of fitted tracks on the source frames: the silhouette outline,
//! the projected skeleton and the projected keypoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use birdfit::silhouette::render_soft_silhouette;
use birdfit::skeleton::{forward_kinematics, project};
use birdfit::SkeletonModel;
use image::{Rgb, RgbImage};
use nalgebra::Vector2;

use crate::error::Result;
use crate::pipeline::{FitFile, FitFrame};
use crate::scene::frame_path;

pub const OUTLINE: Rgb<u8> = Rgb([40, 220, 90]);
pub const BONE: Rgb<u8> = Rgb([250, 200, 40]);
pub const KEYPOINT: Rgb<u8> = Rgb([240, 30, 30]);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderSummary {
    pub written: Vec<PathBuf>,
    /// Frames whose source image was not found.
    pub skipped: Vec<i64>,
}

/// Image pixel holding each projected keypoint.
pub fn keypoint_pixels(frame: &FitFrame) -> Vec<(i64, i64)> {
    frame.image_keypoints.iter().map(|p| (p[0].floor() as i64, p[1].floor() as i64)).collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, a: Vector2<f64>, b: Vector2<f64>, color: Rgb<u8>) {
    let steps = (b - a).abs().max().ceil().max(1.0) as usize;
    for i in 0..=steps {
        let p = a + (b - a) * (i as f64 / steps as f64);
        put(img, p.x.floor() as i64, p.y.floor() as i64, color);
    }
}

// Samples the crop silhouette at image pixel centers and marks inside pixels
// that touch an outside one.
fn outline(img: &mut RgbImage, fit: &FitFile, frame: &FitFrame, model: &SkeletonModel) -> Result<()> {
    let s = render_soft_silhouette(model, &frame.pose, &fit.camera, fit.config.sharpness)?;
    let t = frame.transform;
    let lo = t.to_image(Vector2::zeros());
    let hi = t.to_image(Vector2::new(s.width as f64, s.height as f64));
    let x0 = lo.x.floor().max(0.0) as i64;
    let y0 = lo.y.floor().max(0.0) as i64;
    let x1 = (hi.x.ceil() as i64).min(img.width() as i64);
    let y1 = (hi.y.ceil() as i64).min(img.height() as i64);
    let inside = |x: i64, y: i64| {
        let c = t.to_crop(Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
        c.x >= 0.0 && c.y >= 0.0 && (c.x as usize) < s.width && (c.y as usize) < s.height && s.get(c.x as usize, c.y as usize) > 0.5
    };
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x, y) && [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|&(u, v)| !inside(u, v)) {
                put(img, x, y, OUTLINE);
            }
        }
    }
    Ok(())
}

fn skeleton(img: &mut RgbImage, fit: &FitFile, frame: &FitFrame, model: &SkeletonModel) -> Result<()> {
    let posed = forward_kinematics(model, &frame.pose)?;
    let joints: Vec<Vector2<f64>> = project(&fit.camera, &posed.joints)?.into_iter().map(|p| frame.transform.to_image(p)).collect();
    for (j, joint) in model.joints().iter().enumerate() {
        if let Some(parent) = joint.parent {
            line(img, joints[parent], joints[j], BONE);
        }
    }
    Ok(())
}

/// Draws one overlay per frame covered by any of `fits`, reading
/// `frame_NNNNNN.png` from `frames_dir` and writing the same name into
/// `out_dir`. Frames without a source image are skipped with a warning.
pub fn render_overlay(fits: &[FitFile], model: &SkeletonModel, frames_dir: &Path, out_dir: &Path) -> Result<RenderSummary> {
    let mut by_frame: BTreeMap<i64, Vec<(&FitFile, &FitFrame)>> = BTreeMap::new();
    for fit in fits {
        for f in &fit.frames {
            by_frame.entry(f.frame_index).or_default().push((fit, f));
        }
    }
    let mut summary = RenderSummary::default();
    if by_frame.is_empty() {
        return Ok(summary);
    }
    std::fs::create_dir_all(out_dir)?;
    for (index, items) in by_frame {
        let src = frame_path(frames_dir, index);
        if !src.exists() {
            log::warn!("frame {index}: {} not found, skipping", src.display());
            summary.skipped.push(index);
            continue;
        }
        let mut img = image::open(&src)?.to_rgb8();
        for &(fit, frame) in &items {
            outline(&mut img, fit, frame, model)?;
            skeleton(&mut img, fit, frame, model)?;
        }
        // keypoints last so they stay visible
        for &(_, frame) in &items {
            for (x, y) in keypoint_pixels(frame) {
                for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                    put(&mut img, x + dx, y + dy, KEYPOINT);
                }
            }
        }
        let dst = frame_path(out_dir, index);
        img.save(&dst)?;
        summary.written.push(dst);
    }
    Ok(summary)
}

/// Soft silhouettes of every fitted frame as 8-bit grayscale crops named
/// `silhouette_TRACK_FRAME.png`.
pub fn write_silhouettes(fit: &FitFile, model: &SkeletonModel, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(fit.frames.len());
    for f in &fit.frames {
        let s = render_soft_silhouette(model, &f.pose, &fit.camera, fit.config.sharpness)?;
        let img = image::GrayImage::from_raw(s.width as u32, s.height as u32, s.to_gray8()).expect("buffer matches size");
        let path = out_dir.join(format!("silhouette_{}_{:06}.png", fit.track_id, f.frame_index));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
