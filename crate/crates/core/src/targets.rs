//! Per-pixel training targets.
//!
//! Joint centers become a segmentation map with an ignore band, and damage
//! scores become locally smoothed distributions: a ground-truth grade `x`
//! keeps `1 - p` and hands `p / 2` to each of `x - 1` and `x + 1`. Mass
//! aimed at a neighbour that does not exist stays on `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AnnotatedImage;
use crate::schema::{JointSchema, Limb, Task, BACKGROUND_CLASS, EROSION_CLASSES, NARROWING_CLASSES};

/// Segmentation sentinel for pixels in the `(r, R]` band. Excluded from the loss.
pub const IGNORE: u8 = u8::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Joint radius `r`.
    pub r: f64,
    /// Background radius `R`.
    #[serde(rename = "R")]
    pub big_r: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { r: 32.0, big_r: 40.0 }
    }
}

impl MaskConfig {
    pub fn new(r: f64, big_r: f64) -> Result<Self> {
        let cfg = MaskConfig { r, big_r };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r >= 0.0 && self.r <= self.big_r && self.big_r.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "mask radii need 0 <= r <= R, got r = {}, R = {}",
                self.r, self.big_r
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub p: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { p: 0.1 }
    }
}

impl SmoothingConfig {
    pub fn new(p: f64) -> Result<Self> {
        let cfg = SmoothingConfig { p };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.p) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("smoothing p must lie in [0, 1), got {}", self.p)))
        }
    }
}

/// A joint center as seen by the mask builder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub type_id: usize,
    pub x: f64,
    pub y: f64,
}

#[inline]
fn dist2(col: usize, row: usize, c: &Center) -> f64 {
    let dx = col as f64 - c.x;
    let dy = row as f64 - c.y;
    dx * dx + dy * dy
}

#[inline]
fn classify(best: Option<(f64, usize)>, cfg: &MaskConfig) -> u8 {
    match best {
        Some((d2, id)) if d2 <= cfg.r * cfg.r => id as u8,
        Some((d2, _)) if d2 <= cfg.big_r * cfg.big_r => IGNORE,
        _ => BACKGROUND_CLASS as u8,
    }
}

#[inline]
fn closer(candidate: (f64, usize), current: Option<(f64, usize)>) -> bool {
    match current {
        None => true,
        Some((d2, id)) => candidate.0 < d2 || (candidate.0 == d2 && candidate.1 < id),
    }
}

/// Segmentation map over an `h x w` grid, row-major.
///
/// Each pixel takes its nearest center (ties to the lowest type id): within
/// `r` it is that joint, beyond `R` it is background, in between it is
/// [`IGNORE`]. Only centers within `R` of a pixel can change its label, so
/// each center stamps just the disk of radius `R` around itself.
pub fn build_mask(centers: &[Center], cfg: &MaskConfig, h: usize, w: usize) -> Vec<u8> {
    let mut best: Vec<Option<(f64, usize)>> = vec![None; h * w];
    let big_r2 = cfg.big_r * cfg.big_r;
    for c in centers {
        let r0 = (c.y - cfg.big_r).ceil().max(0.0) as usize;
        let r1 = (c.y + cfg.big_r).floor().min(h as f64 - 1.0);
        let c0 = (c.x - cfg.big_r).ceil().max(0.0) as usize;
        let c1 = (c.x + cfg.big_r).floor().min(w as f64 - 1.0);
        if r1 < 0.0 || c1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let d2 = dist2(col, row, c);
                if d2 > big_r2 {
                    continue;
                }
                let slot = &mut best[row * w + col];
                if closer((d2, c.type_id), *slot) {
                    *slot = Some((d2, c.type_id));
                }
            }
        }
    }
    best.into_iter().map(|b| classify(b, cfg)).collect()
}

/// Reference mask: every pixel checks every center.
pub fn build_mask_exhaustive(centers: &[Center], cfg: &MaskConfig, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut best = None;
            for c in centers {
                let cand = (dist2(col, row, c), c.type_id);
                if closer(cand, best) {
                    best = Some(cand);
                }
            }
            out.push(classify(best, cfg));
        }
    }
    out
}

/// Locally smoothed one-hot distribution over `k` ordered classes.
pub fn smooth_label(x: usize, k: usize, cfg: &SmoothingConfig) -> Vec<f64> {
    assert!(x < k, "class {x} out of range for {k} classes");
    let half = cfg.p / 2.0;
    let mut dist = vec![0.0; k];
    let mut own = 1.0 - cfg.p;
    if x > 0 {
        dist[x - 1] = half;
    } else {
        own += half;
    }
    if x + 1 < k {
        dist[x + 1] = half;
    } else {
        own += half;
    }
    dist[x] = own;
    dist
}

/// Smoothed target for a real-valued grade `t` in `[0, k - 1]`: mass
/// `1 - frac(t)` at `floor(t)` and `frac(t)` at `ceil(t)`, each atom
/// smoothed with [`smooth_label`]. Integer `t` gives `smooth_label` exactly.
pub fn fractional_target(t: f64, k: usize, cfg: &SmoothingConfig) -> Vec<f64> {
    assert!(t >= 0.0 && t <= (k - 1) as f64, "target {t} out of range for {k} classes");
    let lo = t.floor();
    let frac = t - lo;
    let lo = lo as usize;
    if frac == 0.0 {
        return smooth_label(lo, k, cfg);
    }
    let a = smooth_label(lo, k, cfg);
    let b = smooth_label(lo + 1, k, cfg);
    a.iter().zip(&b).map(|(a, b)| (1.0 - frac) * a + frac * b).collect()
}

/// Training targets for one image; all maps row-major, distributions
/// stored pixel-major (`k` consecutive values per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTargets {
    pub height: usize,
    pub width: usize,
    pub seg: Vec<u8>,
    pub narrowing_target: Vec<f64>,
    pub narrowing_valid: Vec<bool>,
    pub erosion_target: Vec<f64>,
    pub erosion_valid: Vec<bool>,
}

impl PixelTargets {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn narrowing_at(&self, pixel: usize) -> &[f64] {
        &self.narrowing_target[pixel * NARROWING_CLASSES..(pixel + 1) * NARROWING_CLASSES]
    }

    pub fn erosion_at(&self, pixel: usize) -> &[f64] {
        &self.erosion_target[pixel * EROSION_CLASSES..(pixel + 1) * EROSION_CLASSES]
    }
}

/// Internal erosion grade seen by the network: feet are trained on half the score.
pub fn erosion_internal(score: i64, limb: Limb) -> f64 {
    match limb {
        Limb::Hand => score as f64,
        Limb::Foot => score as f64 / 2.0,
    }
}

pub fn build_pixel_targets(
    image: &AnnotatedImage,
    schema: &JointSchema,
    mask_cfg: &MaskConfig,
    smooth_cfg: &SmoothingConfig,
) -> Result<PixelTargets> {
    let (h, w) = (image.height(), image.width());
    let centers: Vec<Center> = image
        .joints
        .iter()
        .map(|j| Center {
            type_id: j.type_id,
            x: j.x,
            y: j.y,
        })
        .collect();
    let seg = build_mask(&centers, mask_cfg, h, w);

    // One distribution per joint type present in the image.
    let mut narrowing_by_type: Vec<Option<Vec<f64>>> = vec![None; BACKGROUND_CLASS];
    let mut erosion_by_type: Vec<Option<Vec<f64>>> = vec![None; BACKGROUND_CLASS];
    for j in &image.joints {
        if schema.is_scored(j.type_id, image.limb, Task::Narrowing) {
            let score = j.narrowing.ok_or(Error::MissingScore {
                joint: j.type_id,
                task: "narrowing",
            })?;
            check_range(score, NARROWING_CLASSES - 1, j.type_id, "narrowing")?;
            narrowing_by_type[j.type_id] = Some(smooth_label(score as usize, NARROWING_CLASSES, smooth_cfg));
        }
        if schema.is_scored(j.type_id, image.limb, Task::Erosion) {
            let score = j.erosion.ok_or(Error::MissingScore {
                joint: j.type_id,
                task: "erosion",
            })?;
            let max = match image.limb {
                Limb::Hand => EROSION_CLASSES - 1,
                Limb::Foot => 2 * (EROSION_CLASSES - 1),
            };
            check_range(score, max, j.type_id, "erosion")?;
            let t = erosion_internal(score, image.limb);
            erosion_by_type[j.type_id] = Some(fractional_target(t, EROSION_CLASSES, smooth_cfg));
        }
    }

    let n = h * w;
    let mut out = PixelTargets {
        height: h,
        width: w,
        seg,
        narrowing_target: vec![0.0; n * NARROWING_CLASSES],
        narrowing_valid: vec![false; n],
        erosion_target: vec![0.0; n * EROSION_CLASSES],
        erosion_valid: vec![false; n],
    };
    for px in 0..n {
        let class = out.seg[px] as usize;
        if class >= BACKGROUND_CLASS {
            continue;
        }
        if let Some(d) = &narrowing_by_type[class] {
            out.narrowing_target[px * NARROWING_CLASSES..(px + 1) * NARROWING_CLASSES].copy_from_slice(d);
            out.narrowing_valid[px] = true;
        }
        if let Some(d) = &erosion_by_type[class] {
            out.erosion_target[px * EROSION_CLASSES..(px + 1) * EROSION_CLASSES].copy_from_slice(d);
            out.erosion_valid[px] = true;
        }
    }
    Ok(out)
}

fn check_range(score: i64, max: usize, joint: usize, task: &'static str) -> Result<()> {
    if score < 0 || score as usize > max {
        return Err(Error::ScoreOutOfRange {
            joint,
            task,
            value: score,
            max: max as u32,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{GrayImage, JointAnnotation};
    use crate::schema::Side;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn smooth_label_examples() {
        let cfg = SmoothingConfig { p: 0.1 };
        assert!(close(&smooth_label(2, 5, &cfg), &[0.0, 0.05, 0.9, 0.05, 0.0]));
        assert!(close(&smooth_label(0, 5, &cfg), &[0.95, 0.05, 0.0, 0.0, 0.0]));
        assert!(close(&smooth_label(4, 5, &cfg), &[0.0, 0.0, 0.0, 0.05, 0.95]));
        let off = SmoothingConfig { p: 0.0 };
        for x in 0..6 {
            let d = smooth_label(x, 6, &off);
            for (c, v) in d.iter().enumerate() {
                assert_eq!(*v, if c == x { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn fractional_target_examples() {
        let cfg = SmoothingConfig { p: 0.1 };
        assert_eq!(fractional_target(3.0, 6, &cfg), smooth_label(3, 6, &cfg));
        // 0.5 * [0,0,.05,.9,.05,0] + 0.5 * [0,0,0,.05,.9,.05]
        assert!(close(&fractional_target(3.5, 6, &cfg), &[0.0, 0.0, 0.025, 0.475, 0.475, 0.025]));
        let off = SmoothingConfig { p: 0.0 };
        assert_eq!(fractional_target(0.0, 6, &off), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_three_way_rule() {
        let cfg = MaskConfig::default();
        let centers = [Center {
            type_id: 4,
            x: 0.0,
            y: 0.0,
        }];
        let m = build_mask(&centers, &cfg, 1, 60);
        assert_eq!(m[0], 4);
        assert_eq!(m[32], 4);
        assert_eq!(m[33], IGNORE);
        assert_eq!(m[36], IGNORE);
        assert_eq!(m[40], IGNORE);
        assert_eq!(m[41], BACKGROUND_CLASS as u8);
        assert_eq!(m[50], BACKGROUND_CLASS as u8);
    }

    #[test]
    fn mask_ties_go_to_lowest_id() {
        let cfg = MaskConfig::default();
        let centers = [
            Center {
                type_id: 7,
                x: 20.0,
                y: 0.0,
            },
            Center {
                type_id: 3,
                x: 0.0,
                y: 0.0,
            },
        ];
        let m = build_mask(&centers, &cfg, 1, 21);
        assert_eq!(m[10], 3);
        assert_eq!(m[11], 7);
        assert_eq!(m, build_mask_exhaustive(&centers, &cfg, 1, 21));
    }

    #[test]
    fn no_centers_is_all_background() {
        let m = build_mask(&[], &MaskConfig::default(), 4, 4);
        assert!(m.iter().all(|&c| c == BACKGROUND_CLASS as u8));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(MaskConfig::new(41.0, 40.0).is_err());
        assert!(MaskConfig::new(40.0, 40.0).is_ok());
        assert!(SmoothingConfig::new(1.0).is_err());
        assert!(SmoothingConfig::new(-0.1).is_err());
    }

    fn image(limb: Limb, joints: Vec<JointAnnotation>) -> AnnotatedImage {
        AnnotatedImage {
            pixels: GrayImage::zeros(40, 40),
            limb,
            side: Side::Right,
            joints,
        }
    }

    fn joint(type_id: usize, x: f64, y: f64, narrowing: Option<i64>, erosion: Option<i64>) -> JointAnnotation {
        JointAnnotation {
            type_id,
            x,
            y,
            narrowing,
            erosion,
        }
    }

    #[test]
    fn foot_erosion_is_halved() {
        let schema = JointSchema::default();
        let img = image(Limb::Foot, vec![joint(2, 20.0, 20.0, Some(1), Some(6))]);
        let cfg = SmoothingConfig::default();
        let t = build_pixel_targets(&img, &schema, &MaskConfig::new(5.0, 8.0).unwrap(), &cfg).unwrap();
        let px = 20 * 40 + 20;
        assert!(t.erosion_valid[px]);
        assert_eq!(t.erosion_at(px), smooth_label(3, 6, &cfg).as_slice());
        assert_eq!(t.narrowing_at(px), smooth_label(1, 5, &cfg).as_slice());
        // background corner and ignore band carry no damage supervision
        assert_eq!(t.seg[0], BACKGROUND_CLASS as u8);
        assert!(!t.erosion_valid[0] && !t.narrowing_valid[0]);
        let band = 20 * 40 + 27;
        assert_eq!(t.seg[band], IGNORE);
        assert!(!t.erosion_valid[band] && !t.narrowing_valid[band]);
    }

    #[test]
    fn narrowing_only_wrist_type_has_no_erosion_target() {
        let schema = JointSchema::default();
        // J13 (id 12) is narrowing-only in the default manifest
        let img = image(Limb::Hand, vec![joint(12, 10.0, 10.0, Some(2), None)]);
        let t = build_pixel_targets(&img, &schema, &MaskConfig::default(), &SmoothingConfig::default()).unwrap();
        let px = 10 * 40 + 10;
        assert_eq!(t.seg[px], 12);
        assert!(t.narrowing_valid[px]);
        assert!(!t.erosion_valid[px]);
    }

    #[test]
    fn missing_required_score_is_an_error() {
        let schema = JointSchema::default();
        let img = image(Limb::Hand, vec![joint(0, 10.0, 10.0, Some(2), None)]);
        let err = build_pixel_targets(&img, &schema, &MaskConfig::default(), &SmoothingConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingScore { joint: 0, task: "erosion" }));
    }
}
