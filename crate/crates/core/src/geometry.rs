//! Boxes, binary masks and the crop affine map.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x0, x1) × [y0, y1)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn longest_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn pad(&self, amount: f64) -> Self {
        Self::new(self.x0 - amount, self.y0 - amount, self.x1 + amount, self.y1 + amount)
    }

    /// Intersection with `[0, width) × [0, height)`, `None` when empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<Self> {
        let b = Self::new(self.x0.max(0.0), self.y0.max(0.0), self.x1.min(width as f64), self.y1.min(height as f64));
        b.is_well_formed().then_some(b)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    pub fn validate(&self, name: &'static str) -> Result<()> {
        if self.is_well_formed() {
            Ok(())
        } else {
            Err(Error::invalid(name, format!("box {self:?} is not well ordered")))
        }
    }
}

/// Row-major binary mask. Serialized as its run-length encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MaskRle", try_from = "MaskRle")]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        Error::check_len("mask", width * height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Tight pixel box of the set pixels; `x1`/`y1` are exclusive.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            if let Some(first) = row.iter().position(|&v| v) {
                let last = row.iter().rposition(|&v| v).unwrap_or(first);
                x0 = x0.min(first);
                x1 = x1.max(last + 1);
                y0 = y0.min(y);
                y1 = y + 1;
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    /// Dilation by a `k × k` square. For even `k` the square spans offsets
    /// `-k/2 ..= k - 1 - k/2` around each set pixel.
    pub fn dilate_square(&self, k: usize) -> Mask {
        if k <= 1 {
            return self.clone();
        }
        let lo = (k / 2) as isize;
        let hi = (k - 1 - k / 2) as isize;
        let horizontal = dilate_1d(&self.data, self.width, self.height, lo, hi, true);
        let data = dilate_1d(&horizontal, self.width, self.height, lo, hi, false);
        Mask { width: self.width, height: self.height, data }
    }

    /// Uncompressed run-length encoding: alternating run lengths in
    /// row-major order, starting with a (possibly empty) run of zeros.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in &self.data {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        let mut value = false;
        for &run in runs {
            data.extend(std::iter::repeat(value).take(run));
            value = !value;
        }
        if data.len() != width * height {
            return Err(Error::Format(format!("run lengths sum to {} but mask is {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRle {
    width: usize,
    height: usize,
    runs: Vec<usize>,
}

impl From<Mask> for MaskRle {
    fn from(m: Mask) -> Self {
        Self { width: m.width, height: m.height, runs: m.to_rle() }
    }
}

impl TryFrom<MaskRle> for Mask {
    type Error = Error;

    fn try_from(r: MaskRle) -> Result<Self> {
        Mask::from_rle(r.width, r.height, &r.runs)
    }
}

// A set pixel at `i` covers `i - lo ..= i + hi`, so output `j` is set when any
// input in `j - hi ..= j + lo` is set.
fn dilate_1d(data: &[bool], width: usize, height: usize, lo: isize, hi: isize, along_rows: bool) -> Vec<bool> {
    let (lines, len) = if along_rows { (height, width) } else { (width, height) };
    let index = |line: usize, pos: usize| if along_rows { line * width + pos } else { pos * width + line };
    let mut out = vec![false; data.len()];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        for pos in 0..len {
            prefix[pos + 1] = prefix[pos] + data[index(line, pos)] as usize;
        }
        for pos in 0..len {
            let a = (pos as isize - hi).max(0) as usize;
            let b = ((pos as isize + lo).min(len as isize - 1) + 1) as usize;
            out[index(line, pos)] = prefix[b] > prefix[a];
        }
    }
    out
}

/// Uniform-scale affine map from image pixels to crop pixels:
/// `crop = scale * (image - origin)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin: [f64; 2],
    pub scale: f64,
}

impl Default for CropTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl CropTransform {
    pub fn identity() -> Self {
        Self { origin: [0.0, 0.0], scale: 1.0 }
    }

    pub fn to_crop(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.origin[0]) * self.scale, (p.y - self.origin[1]) * self.scale)
    }

    pub fn to_image(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(p.x / self.scale + self.origin[0], p.y / self.scale + self.origin[1])
    }
}
