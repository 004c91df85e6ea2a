//! Detection preprocessing: temporal keypoint filtering and normalization of
//! each detection into a fixed-size square crop.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropTransform, Mask};
use crate::losses::{Keypoint, ObservationFrame};

/// Weighted median: sort by value and return the first value at which the
/// cumulative weight reaches half of the total. Falls back to equal weights
/// when every weight is zero.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    assert!(!values.is_empty() && values.len() == weights.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let total: f64 = weights.iter().sum();
    let uniform = !(total > 0.0);
    let (total, weight) =
        if uniform { (values.len() as f64, &(|_: usize| 1.0) as &dyn Fn(usize) -> f64) } else { (total, &(|i: usize| weights[i]) as &dyn Fn(usize) -> f64) };
    let half = 0.5 * total;
    let mut cumulative = 0.0;
    for &i in &order {
        cumulative += weight(i);
        if cumulative >= half {
            return values[i];
        }
    }
    values[*order.last().expect("non-empty")]
}

/// Per-keypoint weighted median filter over a track of `T` frames with `K`
/// keypoints each. `x` and `y` are filtered independently with the
/// confidences as weights; the output confidence is the center frame's.
/// Windows are truncated at the sequence ends.
pub fn weighted_median_filter(track: &[Vec<Keypoint>], window: usize) -> Result<Vec<Vec<Keypoint>>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("window", format!("must be odd and at least 1, got {window}")));
    }
    let Some(first) = track.first() else { return Ok(Vec::new()) };
    let k = first.len();
    for frame in track {
        Error::check_len("keypoints", k, frame.len())?;
    }
    let half = window / 2;
    let n = track.len();
    let mut xs = Vec::with_capacity(window);
    let mut ys = Vec::with_capacity(window);
    let mut ws = Vec::with_capacity(window);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n - 1);
        let mut frame = Vec::with_capacity(k);
        #[allow(clippy::needless_range_loop)]
        for j in 0..k {
            xs.clear();
            ys.clear();
            ws.clear();
            for row in &track[lo..=hi] {
                let kp = row[j];
                xs.push(kp.x);
                ys.push(kp.y);
                ws.push(kp.confidence);
            }
            frame.push(Keypoint::new(weighted_median(&xs, &ws), weighted_median(&ys, &ws), track[t][j].confidence));
        }
        out.push(frame);
    }
    Ok(out)
}

/// Filters the keypoints of a crop-space observation sequence. Keypoints are
/// mapped back to image space through each frame's crop transform, filtered
/// there, and mapped into crop space again. Missing frames pass through and
/// do not contribute.
pub fn filter_observations(frames: &[ObservationFrame], window: usize) -> Result<Vec<ObservationFrame>> {
    let present: Vec<usize> = (0..frames.len()).filter(|&i| !frames[i].missing).collect();
    let image_space: Vec<Vec<Keypoint>> = present
        .iter()
        .map(|&i| {
            let f = &frames[i];
            f.keypoints
                .iter()
                .map(|kp| {
                    let p = f.transform.to_image(kp.position());
                    Keypoint::new(p.x, p.y, kp.confidence)
                })
                .collect()
        })
        .collect();
    let filtered = weighted_median_filter(&image_space, window)?;
    let mut out = frames.to_vec();
    for (&i, kps) in present.iter().zip(filtered) {
        let t = out[i].transform;
        out[i].keypoints = kps
            .into_iter()
            .map(|kp| {
                let p = t.to_crop(kp.position());
                Keypoint::new(p.x, p.y, kp.confidence)
            })
            .collect();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Padding added to each side of the detection box, in image pixels.
    pub pad: f64,
    /// Width of the square dilation kernel, in image pixels.
    pub dilation: usize,
    /// Side of the square output crop.
    pub size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { pad: 40.0, dilation: 70, size: 256 }
    }
}

#[derive(Debug, Clone)]
pub struct NormalizedCrop {
    /// Keypoints and the target mask in crop space. The mask is the
    /// undilated segmentation.
    pub observation: ObservationFrame,
    /// The dilated segmentation in crop space; image pixels outside it are
    /// zeroed by [`crop_image`].
    pub dilated: Mask,
    /// The padded, clamped box the crop was taken from.
    pub padded: BBox,
}

/// Crops one detection: pads the box, dilates the mask, pads the region to a
/// square around its center and scales it to `size × size`.
pub fn normalize_crop(
    image_size: (usize, usize),
    bbox: &BBox,
    mask: &Mask,
    keypoints: &[Keypoint],
    frame_index: i64,
    config: &CropConfig,
) -> Result<NormalizedCrop> {
    bbox.validate("bbox")?;
    Error::check_len("mask width", image_size.0, mask.width())?;
    Error::check_len("mask height", image_size.1, mask.height())?;
    let padded =
        bbox.pad(config.pad).clamp_to(image_size.0, image_size.1).ok_or_else(|| Error::invalid("bbox", format!("{bbox:?} does not intersect the image")))?;
    let side = padded.longest_side();
    let center = padded.center();
    let transform = CropTransform { origin: [center.x - 0.5 * side, center.y - 0.5 * side], scale: config.size as f64 / side };

    let dilated_full = dilate_region(mask, &padded, config.dilation);
    let target = resample(mask, &padded, &transform, config.size);
    let dilated = resample(&dilated_full, &padded, &transform, config.size);
    let missing = mask.is_empty();

    let keypoints = keypoints
        .iter()
        .map(|kp| {
            let p = transform.to_crop(kp.position());
            Keypoint::new(p.x, p.y, kp.confidence)
        })
        .collect();

    Ok(NormalizedCrop { observation: ObservationFrame { frame_index, keypoints, mask: target, bbox: *bbox, transform, missing }, dilated, padded })
}

// Dilation only needs the padded region plus the kernel reach.
fn dilate_region(mask: &Mask, region: &BBox, k: usize) -> Mask {
    let reach = k as f64;
    let outer = region.pad(reach).clamp_to(mask.width(), mask.height()).expect("region lies inside the image");
    let (x0, y0) = (outer.x0 as usize, outer.y0 as usize);
    let (w, h) = (outer.x1.ceil() as usize - x0, outer.y1.ceil() as usize - y0);
    let mut sub = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            sub.set(x, y, mask.get(x0 + x, y0 + y));
        }
    }
    let sub = sub.dilate_square(k);
    let mut out = Mask::new(mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            if sub.get(x, y) {
                out.set(x0 + x, y0 + y, true);
            }
        }
    }
    out
}

// Nearest-neighbour sampling at crop pixel centers; samples outside the
// padded region or the image are empty.
fn resample(mask: &Mask, region: &BBox, transform: &CropTransform, size: usize) -> Mask {
    let mut out = Mask::new(size, size);
    for cy in 0..size {
        for cx in 0..size {
            let p = transform.to_image(Vector2::new(cx as f64 + 0.5, cy as f64 + 0.5));
            if p.x < region.x0 || p.y < region.y0 || p.x >= region.x1 || p.y >= region.y1 {
                continue;
            }
            let (ix, iy) = (p.x.floor() as usize, p.y.floor() as usize);
            if ix < mask.width() && iy < mask.height() && mask.get(ix, iy) {
                out.set(cx, cy, true);
            }
        }
    }
    out
}

/// Crops a single-channel image with the crop's transform, zeroing pixels
/// outside the dilated mask.
pub fn crop_image(pixels: &[u8], image_size: (usize, usize), crop: &NormalizedCrop) -> Result<Vec<u8>> {
    let (w, h) = image_size;
    Error::check_len("image", w * h, pixels.len())?;
    let size = crop.dilated.width();
    let t = crop.observation.transform;
    let mut out = vec![0u8; size * size];
    for cy in 0..size {
        for cx in 0..size {
            if !crop.dilated.get(cx, cy) {
                continue;
            }
            let p = t.to_image(Vector2::new(cx as f64 + 0.5, cy as f64 + 0.5));
            if p.x >= 0.0 && p.y >= 0.0 && (p.x as usize) < w && (p.y as usize) < h {
                out[cy * size + cx] = pixels[p.y as usize * w + p.x as usize];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_weighted_median(values: &[f64], weights: &[f64]) -> f64 {
        // the smallest candidate v whose weight at or below v reaches half
        let total: f64 = weights.iter().sum();
        let mut best = f64::INFINITY;
        for &v in values {
            let below: f64 = values.iter().zip(weights).filter(|(x, _)| **x <= v).map(|(_, w)| w).sum();
            if below >= 0.5 * total && v < best {
                best = v;
            }
        }
        best
    }

    #[test]
    fn outlier_is_suppressed() {
        let values = [0.0, 0.0, 100.0, 0.0, 0.0];
        let weights = [1.0, 1.0, 0.01, 1.0, 1.0];
        assert_eq!(weighted_median(&values, &weights), 0.0);
        assert_eq!(brute_weighted_median(&values, &weights), 0.0);
    }

    #[test]
    fn tie_at_half_takes_lower_value() {
        assert_eq!(weighted_median(&[3.0, 1.0], &[1.0, 1.0]), 1.0);
        assert_eq!(weighted_median(&[5.0, 2.0, 9.0, 4.0], &[0.5, 0.5, 0.5, 0.5]), 4.0);
    }

    #[test]
    fn zero_weights_fall_back_to_median() {
        assert_eq!(weighted_median(&[4.0, 1.0, 7.0], &[0.0, 0.0, 0.0]), 4.0);
    }

    #[test]
    fn window_one_is_identity() {
        let track: Vec<Vec<Keypoint>> = (0..6).map(|t| vec![Keypoint::new(t as f64 * 3.0, -(t as f64), 0.2 + 0.1 * t as f64)]).collect();
        assert_eq!(weighted_median_filter(&track, 1).unwrap(), track);
    }

    #[test]
    fn even_window_is_rejected() {
        assert!(weighted_median_filter(&[], 4).is_err());
        assert!(weighted_median_filter(&[], 0).is_err());
    }

    #[test]
    fn filter_suppresses_spike_and_keeps_center_confidence() {
        let xs = [0.0, 0.0, 100.0, 0.0, 0.0];
        let cs = [1.0, 1.0, 0.01, 1.0, 1.0];
        let track: Vec<Vec<Keypoint>> = xs.iter().zip(cs).map(|(x, c)| vec![Keypoint::new(*x, 5.0, c)]).collect();
        let out = weighted_median_filter(&track, 5).unwrap();
        assert_eq!(out[2][0].x, 0.0);
        assert_eq!(out[2][0].y, 5.0);
        assert_eq!(out[2][0].confidence, 0.01);
    }

    #[test]
    fn crop_center_maps_to_crop_center() {
        let mut mask = Mask::new(640, 480);
        mask.set(300, 200, true);
        let bbox = BBox::new(250.0, 180.0, 350.0, 240.0);
        let kp = [Keypoint::new(300.0, 210.0, 1.0)];
        let crop = normalize_crop((640, 480), &bbox, &mask, &kp, 0, &CropConfig::default()).unwrap();
        let p = crop.observation.keypoints[0];
        assert!((p.x - 128.0).abs() < 1e-12 && (p.y - 128.0).abs() < 1e-12);
        assert!((crop.observation.transform.scale - 256.0 / 180.0).abs() < 1e-12);
        assert!(!crop.observation.missing);
    }

    #[test]
    fn crop_roundtrip() {
        let mask = Mask::new(640, 480);
        let bbox = BBox::new(10.0, 300.0, 90.0, 470.0);
        let kps = [Keypoint::new(20.0, 310.0, 0.5), Keypoint::new(85.5, 460.25, 0.9)];
        let crop = normalize_crop((640, 480), &bbox, &mask, &kps, 3, &CropConfig::default()).unwrap();
        assert!(crop.observation.missing);
        for (orig, c) in kps.iter().zip(&crop.observation.keypoints) {
            let back = crop.observation.transform.to_image(c.position());
            assert!((back - orig.position()).norm() < 1e-9);
        }
    }

    #[test]
    fn crop_dilates_single_pixel_to_square() {
        let mut mask = Mask::new(800, 800);
        mask.set(400, 400, true);
        let bbox = BBox::new(300.0, 300.0, 500.0, 500.0);
        // pad 40 → 280 px region; scale is 256/280.
        let crop = normalize_crop((800, 800), &bbox, &mask, &[], 0, &CropConfig::default()).unwrap();
        let full = dilate_region(&mask, &crop.padded, 70);
        assert_eq!(full.count(), 70 * 70);
        assert_eq!(full.tight_bbox(), Some(BBox::new(365.0, 365.0, 435.0, 435.0)));
        let b = crop.dilated.tight_bbox().unwrap();
        let side = 70.0 * 256.0 / 280.0;
        assert!((b.width() - side).abs() <= 1.0 && (b.height() - side).abs() <= 1.0);
    }

    #[test]
    fn crop_outside_image_is_error() {
        let mask = Mask::new(100, 100);
        let bbox = BBox::new(300.0, 300.0, 400.0, 400.0);
        assert!(normalize_crop((100, 100), &bbox, &mask, &[], 0, &CropConfig::default()).is_err());
    }

    #[test]
    fn crop_image_zeroes_outside_dilated_mask() {
        let (w, h) = (300, 300);
        let pixels = vec![200u8; w * h];
        let mut mask = Mask::new(w, h);
        mask.set(150, 150, true);
        let crop = normalize_crop((w, h), &BBox::new(140.0, 140.0, 160.0, 160.0), &mask, &[], 0, &CropConfig::default()).unwrap();
        let out = crop_image(&pixels, (w, h), &crop).unwrap();
        for (i, &v) in out.iter().enumerate() {
            let inside = crop.dilated.data()[i];
            assert_eq!(v, if inside { 200 } else { 0 });
        }
    }

    proptest! {
        #[test]
        fn weighted_median_matches_brute_force(
            values in proptest::collection::vec(-50i32..50, 1..9),
            weights in proptest::collection::vec(0u8..5, 9),
        ) {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            let weights: Vec<f64> = weights[..values.len()].iter().map(|&w| w as f64 * 0.25).collect();
            let got = weighted_median(&values, &weights);
            prop_assert!(values.contains(&got));
            if weights.iter().sum::<f64>() > 0.0 {
                prop_assert_eq!(got, brute_weighted_median(&values, &weights));
            }
        }

        #[test]
        fn filter_selects_window_members(
            xs in proptest::collection::vec(-100.0..100.0f64, 1..20),
            cs in proptest::collection::vec(0.0..1.0f64, 20),
        ) {
            let track: Vec<Vec<Keypoint>> = xs.iter().zip(&cs).map(|(x, c)| vec![Keypoint::new(*x, -x, *c)]).collect();
            let out = weighted_median_filter(&track, 5).unwrap();
            for (t, frame) in out.iter().enumerate() {
                let lo = t.saturating_sub(2);
                let hi = (t + 2).min(xs.len() - 1);
                prop_assert!(xs[lo..=hi].contains(&frame[0].x));
                prop_assert!(xs[lo..=hi].iter().any(|x| -x == frame[0].y));
            }
        }

        #[test]
        fn filter_is_idempotent_on_constant_sequences(x in -100.0..100.0f64, y in -100.0..100.0f64, n in 1usize..15) {
            let track = vec![vec![Keypoint::new(x, y, 0.7)]; n];
            let once = weighted_median_filter(&track, 5).unwrap();
            prop_assert_eq!(&once, &track);
            prop_assert_eq!(weighted_median_filter(&once, 5).unwrap(), once);
        }

        #[test]
        fn crop_scale_is_uniform(x0 in 0.0..500.0f64, y0 in 0.0..300.0f64, w in 5.0..200.0f64, h in 5.0..200.0f64) {
            let mask = Mask::new(800, 600);
            let bbox = BBox::new(x0, y0, x0 + w, y0 + h);
            let crop = normalize_crop((800, 600), &bbox, &mask, &[], 0, &CropConfig::default()).unwrap();
            let t = crop.observation.transform;
            let a = t.to_crop(Vector2::new(x0, y0));
            let b = t.to_crop(Vector2::new(x0 + w, y0 + h));
            prop_assert!(((b.x - a.x) / w - (b.y - a.y) / h).abs() < 1e-9);
            prop_assert!(crop.padded.longest_side() * t.scale - 256.0 < 1e-9);
        }
    }
}
