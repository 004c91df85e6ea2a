//! Differentiable soft silhouettes rendered from per-bone capsules.
//!
//! Each bone projects to a 2D capsule (segment plus radius). A pixel's
//! occupancy under one capsule is `sigmoid(-sharpness · d)` with `d` the
//! signed distance to the capsule boundary; capsules combine by
//! probabilistic OR, `1 - Π(1 - pᵢ)`.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{fk_backward, forward_kinematics, project_backward, project_point, Camera, PoseGradient, PoseParams, Posed, SkeletonModel};

/// Capsule contributions are dropped once `sharpness · d` exceeds this,
/// where the occupancy is below `sigmoid(-20) ≈ 2e-9`.
const CUTOFF: f64 = 20.0;

/// Squared softening length for the point-to-segment distance.
const DIST_EPS2: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteConfig {
    /// Slope of the occupancy sigmoid, per pixel. At 2.0 the 12%–88%
    /// transition spans about two pixels.
    pub sharpness: f64,
}

impl Default for SilhouetteConfig {
    fn default() -> Self {
        Self { sharpness: 2.0 }
    }
}

/// Occupancy grid with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSilhouette {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SoftSilhouette {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 8-bit grayscale rendering, row-major.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// A projected bone: segment `a → b` with radius, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CapsuleGrad {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub radius: f64,
}

struct Span {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Capsule {
    fn span(&self, width: usize, height: usize, sharpness: f64) -> Option<Span> {
        let reach = self.reach(sharpness);
        let lo_x = self.a.x.min(self.b.x) - reach;
        let hi_x = self.a.x.max(self.b.x) + reach;
        let lo_y = self.a.y.min(self.b.y) - reach;
        let hi_y = self.a.y.max(self.b.y) + reach;
        // pixel centers at i + 0.5 inside [lo, hi]
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0);
        let last = |hi: f64, n: usize| ((hi - 0.5).floor() + 1.0).min(n as f64);
        let (x0, x1) = (first(lo_x), last(hi_x, width));
        let (y0, y1) = (first(lo_y), last(hi_y, height));
        if !(x0 < x1 && y0 < y1) {
            return None;
        }
        Some(Span { x0: x0 as usize, x1: x1 as usize, y0: y0 as usize, y1: y1 as usize })
    }

    /// Pixel columns of row `y` whose centers lie within `reach` of the
    /// segment. The inflated capsule is convex, so this is one interval: the
    /// hull of the row's intersections with the two end discs and the band.
    fn row_range(&self, y: usize, reach: f64, width: usize) -> Option<(usize, usize)> {
        let yc = y as f64 + 0.5;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in [self.a, self.b] {
            let dy = yc - c.y;
            let w2 = reach * reach - dy * dy;
            if w2 >= 0.0 {
                let w = w2.sqrt();
                lo = lo.min(c.x - w);
                hi = hi.max(c.x + w);
            }
        }
        let ab = self.b - self.a;
        let len = ab.norm();
        if len > 0.0 {
            let u = ab / len;
            let n = Vector2::new(-u.y, u.x);
            // coef·x + off ∈ [min, max] for the along- and across-bone coordinates
            let mut band = Some((f64::NEG_INFINITY, f64::INFINITY));
            for (dir, min, max) in [(u, 0.0, len), (n, -reach, reach)] {
                let coef = dir.x;
                let off = dir.y * (yc - self.a.y) - dir.x * self.a.x;
                band = band.and_then(|(l, h)| {
                    if coef == 0.0 {
                        (min..=max).contains(&off).then_some((l, h))
                    } else {
                        let (p, q) = ((min - off) / coef, (max - off) / coef);
                        let (p, q) = if p <= q { (p, q) } else { (q, p) };
                        let (l, h) = (l.max(p), h.min(q));
                        (l <= h).then_some((l, h))
                    }
                });
            }
            if let Some((l, h)) = band {
                lo = lo.min(l);
                hi = hi.max(h);
            }
        }
        if !(lo <= hi) {
            return None;
        }
        let x0 = (lo - 0.5).ceil().max(0.0);
        let x1 = ((hi - 0.5).floor() + 1.0).min(width as f64);
        (x0 < x1).then_some((x0 as usize, x1 as usize))
    }

    fn reach(&self, sharpness: f64) -> f64 {
        // slightly generous so the exact cutoff test decides at the boundary
        (self.radius + CUTOFF / sharpness) * (1.0 + 1e-9) + 1e-9
    }

    /// Returns `(signed distance, closest-point parameter t, unit direction
    /// from the closest point to p)`.
    #[inline]
    fn distance(&self, p: Vector2<f64>) -> (f64, f64, Vector2<f64>) {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let e = p - (self.a + ab * t);
        let dist = (e.norm_squared() + DIST_EPS2).sqrt();
        (dist - self.radius, t, e / dist)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Union of the capsules' pixel spans; pixels outside it have `S = 0`.
fn coverage(capsules: &[Capsule], width: usize, height: usize, sharpness: f64) -> Option<Span> {
    capsules.iter().filter_map(|c| c.span(width, height, sharpness)).reduce(|a, b| Span {
        x0: a.x0.min(b.x0),
        x1: a.x1.max(b.x1),
        y0: a.y0.min(b.y0),
        y1: a.y1.max(b.y1),
    })
}

/// Product of `1 - pᵢ` over all capsules for every pixel of `region`,
/// row-major within the region.
fn complement_product(capsules: &[Capsule], region: &Span, width: usize, height: usize, sharpness: f64) -> Vec<f64> {
    let rw = region.x1 - region.x0;
    let mut q = vec![1.0; rw * (region.y1 - region.y0)];
    for cap in capsules {
        let Some(span) = cap.span(width, height, sharpness) else { continue };
        let reach = cap.reach(sharpness);
        for y in span.y0..span.y1 {
            let Some((x0, x1)) = cap.row_range(y, reach, width) else { continue };
            let row = &mut q[(y - region.y0) * rw..(y - region.y0 + 1) * rw];
            for x in x0..x1 {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let (d, _, _) = cap.distance(p);
                if sharpness * d < CUTOFF {
                    // 1 - sigmoid(-s d) = sigmoid(s d)
                    row[x - region.x0] *= sigmoid(sharpness * d);
                }
            }
        }
    }
    q
}

/// Soft silhouette of a set of capsules.
pub fn render_capsules(capsules: &[Capsule], width: usize, height: usize, sharpness: f64) -> Result<SoftSilhouette> {
    if !(sharpness > 0.0) {
        return Err(Error::invalid("sharpness", format!("must be positive, got {sharpness}")));
    }
    let mut values = vec![0.0; width * height];
    if let Some(region) = coverage(capsules, width, height, sharpness) {
        let q = complement_product(capsules, &region, width, height, sharpness);
        let rw = region.x1 - region.x0;
        for y in region.y0..region.y1 {
            let src = &q[(y - region.y0) * rw..(y - region.y0 + 1) * rw];
            for (v, qi) in values[y * width + region.x0..y * width + region.x1].iter_mut().zip(src) {
                *v = 1.0 - qi;
            }
        }
    }
    Ok(SoftSilhouette { width, height, values })
}

/// Sums `per_pixel(index, S)` over every pixel that some capsule can reach,
/// in the same order as [`render_and_backprop`].
pub(crate) fn render_and_reduce<F>(capsules: &[Capsule], width: usize, height: usize, sharpness: f64, mut per_pixel: F) -> f64
where
    F: FnMut(usize, f64) -> f64,
{
    let Some(region) = coverage(capsules, width, height, sharpness) else { return 0.0 };
    let rw = region.x1 - region.x0;
    let q = complement_product(capsules, &region, width, height, sharpness);
    let mut total = 0.0;
    for y in region.y0..region.y1 {
        let base = (y - region.y0) * rw;
        for x in region.x0..region.x1 {
            total += per_pixel(y * width + x, 1.0 - q[base + x - region.x0]);
        }
    }
    total
}

/// Renders and backpropagates a per-pixel upstream gradient `∂L/∂S` through
/// the union and the capsule distances. `upstream` is called with
/// `(index, S)` for every pixel that some capsule can reach and returns the
/// pixel's loss and `∂L/∂S`; the losses are summed into the returned
/// scalar. Pixels that are not visited have `S = 0` exactly.
pub(crate) fn render_and_backprop<F>(capsules: &[Capsule], width: usize, height: usize, sharpness: f64, mut upstream: F) -> (f64, Vec<CapsuleGrad>)
where
    F: FnMut(usize, f64) -> (f64, f64),
{
    let Some(region) = coverage(capsules, width, height, sharpness) else {
        return (0.0, vec![CapsuleGrad::default(); capsules.len()]);
    };
    let rw = region.x1 - region.x0;
    let q = complement_product(capsules, &region, width, height, sharpness);
    let mut loss = 0.0;
    let mut g_s = vec![0.0; q.len()];
    for y in region.y0..region.y1 {
        let base = (y - region.y0) * rw;
        for x in region.x0..region.x1 {
            let i = base + x - region.x0;
            let (value, grad) = upstream(y * width + x, 1.0 - q[i]);
            loss += value;
            g_s[i] = grad;
        }
    }
    let grads = capsules
        .iter()
        .map(|cap| {
            let mut g = CapsuleGrad::default();
            let Some(span) = cap.span(width, height, sharpness) else { return g };
            let reach = cap.reach(sharpness);
            for y in span.y0..span.y1 {
                let Some((x0, x1)) = cap.row_range(y, reach, width) else { continue };
                let base = (y - region.y0) * rw;
                for x in x0..x1 {
                    let idx = base + x - region.x0;
                    let up = g_s[idx];
                    if up == 0.0 {
                        continue;
                    }
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let (d, t, dir) = cap.distance(p);
                    let sd = sharpness * d;
                    if sd >= CUTOFF {
                        continue;
                    }
                    // ∂S/∂d = -s · pᵢ · Π_j(1 - p_j)
                    let occupancy = sigmoid(-sd);
                    let gd = -up * sharpness * occupancy * q[idx];
                    // d = |p - a - t(b - a)| - r, t stationary
                    g.a -= dir * (gd * (1.0 - t));
                    g.b -= dir * (gd * t);
                    g.radius -= gd;
                }
            }
            g
        })
        .collect();
    (loss, grads)
}

/// The bones of a posed model as projected capsules. Capsule `j - 1` is the
/// bone ending at joint `j`.
pub fn project_capsules(model: &SkeletonModel, posed: &Posed, sigma: f64, camera: &Camera) -> Vec<Capsule> {
    let px_per_unit = camera.pixels_per_unit();
    (1..model.num_joints())
        .map(|j| {
            let parent = model.joints()[j].parent.expect("non-root joint has a parent");
            Capsule {
                a: project_point(camera, &posed.joints[parent]),
                b: project_point(camera, &posed.joints[j]),
                radius: sigma * model.bone_radius(j) * px_per_unit,
            }
        })
        .collect()
}

/// Chains capsule gradients back to the pose.
pub(crate) fn capsules_backward(model: &SkeletonModel, pose: &PoseParams, posed: &Posed, camera: &Camera, grads: &[CapsuleGrad]) -> PoseGradient {
    let mut g_joints = vec![Vector3::zeros(); model.num_joints()];
    let mut g_sigma = 0.0;
    let px_per_unit = camera.pixels_per_unit();
    for (k, g) in grads.iter().enumerate() {
        let j = k + 1;
        let parent = model.joints()[j].parent.expect("non-root joint has a parent");
        g_joints[parent] += project_backward(camera, &posed.joints[parent], &g.a);
        g_joints[j] += project_backward(camera, &posed.joints[j], &g.b);
        g_sigma += g.radius * model.bone_radius(j) * px_per_unit;
    }
    let mut out = fk_backward(model, pose, posed, &g_joints, &[]);
    out.sigma += g_sigma;
    out
}

/// Soft silhouette of the posed model at the camera's image size.
pub fn render_soft_silhouette(model: &SkeletonModel, pose: &PoseParams, camera: &Camera, sharpness: f64) -> Result<SoftSilhouette> {
    let posed = forward_kinematics(model, pose)?;
    let capsules = project_capsules(model, &posed, pose.sigma, camera);
    let (w, h) = camera.image_size;
    render_capsules(&capsules, w, h, sharpness)
}
