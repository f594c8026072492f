//! Image normalization and geometric augmentation.
//!
//! Bounding boxes come from a reduced Canny detector: central-difference
//! gradients plus hysteresis, no non-maximum suppression, since only the
//! extent of the edge set matters. Augmentations act on pixels and joint
//! centers through the same affine map; segmentation targets are rebuilt
//! from the moved centers afterwards, never warped.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AnnotatedImage, GrayImage};

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn full(height: usize, width: usize) -> BBox {
        BBox {
            row_min: 0,
            col_min: 0,
            row_max: height - 1,
            col_max: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.col_min as f64 && x <= self.col_max as f64 && y >= self.row_min as f64 && y <= self.row_max as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BBoxParams {
    pub low_frac: f64,
    pub high_frac: f64,
    pub margin_frac: f64,
}

impl Default for BBoxParams {
    fn default() -> Self {
        BBoxParams {
            low_frac: 0.04,
            high_frac: 0.10,
            margin_frac: 0.03,
        }
    }
}

/// Fewest edge pixels accepted as image content.
pub const MIN_EDGE_PIXELS: usize = 50;

/// Largest central-difference gradient magnitude on a `[0, 1]` image:
/// both half-differences saturate at 0.5.
pub const MAX_GRADIENT_MAGNITUDE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Central-difference gradient magnitude, replicating border pixels.
pub fn gradient_magnitude(pixels: &GrayImage) -> Vec<f64> {
    let (h, w) = (pixels.height(), pixels.width());
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        f64::from(pixels.get(r, c))
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = 0.5 * (at(r, c + 1) - at(r, c - 1));
            let gy = 0.5 * (at(r + 1, c) - at(r - 1, c));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Hysteresis edge map: strong pixels plus weak pixels 8-connected to them.
pub fn edge_map(pixels: &GrayImage, params: &BBoxParams) -> Vec<bool> {
    let (h, w) = (pixels.height(), pixels.width());
    let mag = gradient_magnitude(pixels);
    let high = params.high_frac * MAX_GRADIENT_MAGNITUDE;
    let low = params.low_frac * MAX_GRADIENT_MAGNITUDE;
    let mut kept = vec![false; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in mag.iter().enumerate() {
        if m > high {
            kept[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !kept[j] && mag[j] > low {
                    kept[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    kept
}

/// Tight box around the hysteresis edge set, grown by `margin_frac` of the
/// image size on each side and clipped to the image.
pub fn detect_bbox(pixels: &GrayImage, params: &BBoxParams) -> Result<BBox> {
    let (h, w) = (pixels.height(), pixels.width());
    if h < 8 || w < 8 {
        return Err(Error::NoContent(format!("{h}x{w} image is too small")));
    }
    let edges = edge_map(pixels, params);
    let count = edges.iter().filter(|&&e| e).count();
    if count < MIN_EDGE_PIXELS {
        return Err(Error::NoContent(format!("{count} edge pixels, need {MIN_EDGE_PIXELS}")));
    }
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in edges.iter().enumerate().filter(|(_, &e)| e) {
        let (r, c) = (i / w, i % w);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let mr = (params.margin_frac * h as f64).round() as usize;
    let mc = (params.margin_frac * w as f64).round() as usize;
    Ok(BBox {
        row_min: r0.saturating_sub(mr),
        col_min: c0.saturating_sub(mc),
        row_max: (r1 + mr).min(h - 1),
        col_max: (c1 + mc).min(w - 1),
    })
}

/// Crops `bbox` and bilinearly resamples it to `out_h x out_w`.
///
/// Output pixel `(x', y')` reads source `(col_min + x'·sx, row_min + y'·sy)`
/// with `sx = box_w / out_w`; centers move by the inverse of that map.
pub fn crop_resize(image: &AnnotatedImage, bbox: BBox, out_h: usize, out_w: usize) -> Result<AnnotatedImage> {
    let (h, w) = (image.height(), image.width());
    if bbox.row_min > bbox.row_max || bbox.col_min > bbox.col_max || bbox.row_max >= h || bbox.col_max >= w {
        return Err(Error::ShapeMismatch(format!("box {bbox:?} invalid for a {h}x{w} image")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch("output size must be non-zero".into()));
    }
    for j in &image.joints {
        if !bbox.contains_point(j.x, j.y) {
            return Err(Error::CenterOutsideBox {
                joint: j.type_id,
                x: j.x,
                y: j.y,
            });
        }
    }
    let sx = bbox.width() as f64 / out_w as f64;
    let sy = bbox.height() as f64 / out_h as f64;
    let (c_lo, c_hi) = (bbox.col_min as f64, bbox.col_max as f64);
    let (r_lo, r_hi) = (bbox.row_min as f64, bbox.row_max as f64);
    let src = &image.pixels;
    let pixels = GrayImage::from_fn(out_h, out_w, |r, c| {
        let x = (c_lo + c as f64 * sx).min(c_hi);
        let y = (r_lo + r as f64 * sy).min(r_hi);
        sample_clamped(src, x, y, bbox)
    });
    let joints = image
        .joints
        .iter()
        .map(|j| {
            let mut j = j.clone();
            j.x = (j.x - c_lo) / sx;
            j.y = (j.y - r_lo) / sy;
            j
        })
        .collect();
    Ok(AnnotatedImage {
        pixels,
        limb: image.limb,
        side: image.side,
        joints,
    })
}

// Bilinear read restricted to the box; neighbours past its far edge repeat it.
fn sample_clamped(src: &GrayImage, x: f64, y: f64, bbox: BBox) -> f32 {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(bbox.col_max);
    let y1 = (y0 + 1).min(bbox.row_max);
    let p = |r: usize, c: usize| f64::from(src.get(r, c));
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Detects the content box and resamples the image to the given resolution.
pub fn normalize(image: &AnnotatedImage, params: &BBoxParams, out_h: usize, out_w: usize) -> Result<AnnotatedImage> {
    let bbox = detect_bbox(&image.pixels, params)?;
    crop_resize(image, bbox, out_h, out_w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub scale: f64,
    pub hflip: bool,
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            rotation_deg: 0.0,
            scale: 1.0,
            hflip: false,
            rng_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && !self.hflip
    }

    /// Spec whose forward map undoes this one's.
    ///
    /// Flip-then-rotate inverts to rotate-back-then-flip; conjugating by the
    /// flip negates the angle, so the flipped inverse keeps `rotation_deg`.
    pub fn inverse(&self) -> Self {
        AugmentSpec {
            rotation_deg: if self.hflip { self.rotation_deg } else { -self.rotation_deg },
            scale: 1.0 / self.scale,
            hflip: self.hflip,
            rng_seed: self.rng_seed,
        }
    }
}

/// Sampling ranges for [`AugmentSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation_deg: 15.0,
            min_scale: 0.9,
            max_scale: 1.1,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        AugmentRanges {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation_deg >= 0.0
            && self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad augmentation ranges {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentSpec {
        // Always draw all four values so the stream position does not depend on the ranges.
        let u_rot: f64 = rng.gen();
        let u_scale: f64 = rng.gen();
        let u_flip: f64 = rng.gen();
        let rng_seed: u64 = rng.gen();
        AugmentSpec {
            rotation_deg: self.max_rotation_deg * (2.0 * u_rot - 1.0),
            scale: self.min_scale + (self.max_scale - self.min_scale) * u_scale,
            hflip: u_flip < self.hflip_prob,
            rng_seed,
        }
    }
}

/// Forward augmentation map for a point on a `w x h` canvas: optional
/// horizontal flip, then rotation and scaling about the canvas center
/// `((w-1)/2, (h-1)/2)`.
pub fn transform_point(x: f64, y: f64, spec: &AugmentSpec, w: usize, h: usize) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let x = if spec.hflip { w as f64 - 1.0 - x } else { x };
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (
        cx + spec.scale * (cos * dx - sin * dy),
        cy + spec.scale * (sin * dx + cos * dy),
    )
}

fn inverse_point(x: f64, y: f64, spec: &AugmentSpec, w: usize, h: usize) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let (dx, dy) = ((x - cx) / spec.scale, (y - cy) / spec.scale);
    let sx = cx + cos * dx + sin * dy;
    let sy = cy - sin * dx + cos * dy;
    let sx = if spec.hflip { w as f64 - 1.0 - sx } else { sx };
    (sx, sy)
}

/// Applies `spec` to pixels (inverse-mapped bilinear, zero outside) and centers.
pub fn augment(image: &AnnotatedImage, spec: &AugmentSpec) -> Result<AnnotatedImage> {
    if spec.is_identity() {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let mut joints = image.joints.clone();
    for j in &mut joints {
        let (x, y) = transform_point(j.x, j.y, spec, w, h);
        if !(x >= 0.0 && x <= w as f64 - 1.0 && y >= 0.0 && y <= h as f64 - 1.0) {
            return Err(Error::CenterLost { joint: j.type_id });
        }
        j.x = x;
        j.y = y;
    }
    let src = &image.pixels;
    let pixels = GrayImage::from_fn(h, w, |r, c| {
        let (sx, sy) = inverse_point(c as f64, r as f64, spec, w, h);
        src.sample_bilinear_zero(sx, sy)
    });
    Ok(AnnotatedImage {
        pixels,
        limb: image.limb,
        side: if spec.hflip { image.side.flipped() } else { image.side },
        joints,
    })
}
