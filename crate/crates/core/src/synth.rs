//! Procedural "radiographs" whose local appearance encodes the damage grades.
//!
//! Every joint is drawn as two parallel bright bars. The gap between them
//! shrinks with the narrowing grade; erosion bites a semicircular notch out
//! of one bar end, its radius growing with the grade. Bars are rendered
//! with 4x4 supersampling so sub-pixel geometry changes still show up as
//! intensity changes. Right limbs are drawn canonically and left limbs are
//! their mirror images, so a horizontal flip maps one onto the other.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::error::{Error, Result};
use crate::image::{AnnotatedImage, GrayImage, JointAnnotation};
use crate::schema::{score_range, ImageKey, JointSchema, Limb, PatientRecord, Side, Task, NUM_FOOT_JOINTS, NUM_JOINT_TYPES};

const SUPERSAMPLE: usize = 4;
const GEOMETRIC_RATIO: f64 = 0.6;
const HAND_GRID: (usize, usize) = (3, 7);
const FOOT_GRID: (usize, usize) = (2, 3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub canvas: (usize, usize),
    pub joints_per_hand: usize,
    pub joints_per_foot: usize,
    /// Thickness of each bar.
    pub bar_width: f64,
    /// Extent of each hand bar along its long axis.
    pub hand_bar_length: f64,
    /// Foot joints sit on a sparser grid, so their bars are longer to fill
    /// more of the space around each center.
    pub foot_bar_length: f64,
    pub gap_base: f64,
    pub gap_per_grade: f64,
    pub notch_per_grade: f64,
    pub noise_sigma: f64,
    pub score_zero_prob: f64,
    pub intensity: f64,
    pub max_jitter: f64,
    pub max_tilt_deg: f64,
    /// Peak of a linear soft-tissue background ramp, brightest on the
    /// radial side. Without it a left limb is indistinguishable from a
    /// right one and mirrored joints cannot be told apart.
    pub tissue_ramp: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_patients: 64,
            canvas: (64, 64),
            joints_per_hand: NUM_JOINT_TYPES,
            joints_per_foot: NUM_FOOT_JOINTS,
            bar_width: 5.0,
            hand_bar_length: 4.0,
            foot_bar_length: 12.0,
            gap_base: 2.0,
            gap_per_grade: 1.5,
            notch_per_grade: 0.8,
            noise_sigma: 0.05,
            score_zero_prob: 0.5,
            intensity: 0.9,
            max_jitter: 2.0,
            max_tilt_deg: 10.0,
            tissue_ramp: 0.2,
        }
    }
}

impl SynthConfig {
    /// Gap between the bars for a narrowing grade.
    pub fn gap(&self, narrowing: u32) -> f64 {
        self.gap_base + (4.0 - f64::from(narrowing)) * self.gap_per_grade
    }

    /// Notch radius for an erosion grade normalized to `[0, 1]`.
    pub fn notch_radius(&self, normalized_erosion: f64) -> f64 {
        self.notch_per_grade * normalized_erosion * 5.0
    }

    pub fn bar_length(&self, limb: Limb) -> f64 {
        match limb {
            Limb::Hand => self.hand_bar_length,
            Limb::Foot => self.foot_bar_length,
        }
    }

    /// Worst-case half extents `(x, y)` of a joint footprint including
    /// tilt and jitter.
    fn margins(&self, limb: Limb) -> (f64, f64) {
        let along = self.bar_length(limb) / 2.0;
        let across = self.gap(0).max(self.gap(4)) / 2.0 + self.bar_width;
        let (s, c) = self.max_tilt_deg.to_radians().sin_cos();
        let pad = self.max_jitter + 0.5;
        (along * c + across * s + pad, across * c + along * s + pad)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.joints_per_hand != NUM_JOINT_TYPES || self.joints_per_foot != NUM_FOOT_JOINTS {
            return bad(format!(
                "joints_per_hand/joints_per_foot must be {NUM_JOINT_TYPES}/{NUM_FOOT_JOINTS}"
            ));
        }
        let positive = [self.bar_width, self.hand_bar_length, self.foot_bar_length, self.intensity];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("bar geometry and intensity must be positive".into());
        }
        let non_negative = [self.gap_base, self.gap_per_grade, self.notch_per_grade, self.noise_sigma, self.max_jitter, self.max_tilt_deg, self.tissue_ramp];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("synthetic geometry parameters must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.score_zero_prob) {
            return bad("score_zero_prob must lie in [0, 1]".into());
        }
        let (h, w) = self.canvas;
        for limb in [Limb::Hand, Limb::Foot] {
            let (rows, cols) = grid(limb);
            let (mx, my) = self.margins(limb);
            let need_w = 2.0 * mx + (cols - 1) as f64;
            let need_h = 2.0 * my + (rows - 1) as f64;
            if (w as f64) < need_w + 1.0 || (h as f64) < need_h + 1.0 {
                return bad(format!("{h}x{w} canvas cannot hold the {rows}x{cols} joint grid"));
            }
        }
        Ok(())
    }

    /// Nominal (unjittered) centers of the canonical right limb, indexed by grid slot.
    pub fn layout(&self, limb: Limb) -> Vec<(f64, f64)> {
        let (rows, cols) = grid(limb);
        let (h, w) = self.canvas;
        let (mx, my) = self.margins(limb);
        let step = |lo: f64, hi: f64, n: usize, i: usize| {
            if n == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push((step(mx, w as f64 - 1.0 - mx, cols, c), step(my, h as f64 - 1.0 - my, rows, r)));
            }
        }
        out
    }
}

fn grid(limb: Limb) -> (usize, usize) {
    match limb {
        Limb::Hand => HAND_GRID,
        Limb::Foot => FOOT_GRID,
    }
}

/// Zero with probability `score_zero_prob`, otherwise a geometric grade on
/// `1..=max` (ratio 0.6) truncated to the task's range.
pub fn sample_scores<R: Rng + ?Sized>(rng: &mut R, task: Task, limb: Limb, cfg: &SynthConfig) -> u32 {
    let max = score_range(task, limb).max;
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    if u < cfg.score_zero_prob {
        return 0;
    }
    let total: f64 = (0..max).map(|k| GEOMETRIC_RATIO.powi(k as i32)).sum();
    let mut acc = 0.0;
    for k in 1..=max {
        acc += GEOMETRIC_RATIO.powi(k as i32 - 1) / total;
        if v < acc {
            return k;
        }
    }
    max
}

/// Scores of one joint to render; `None` for an unscored task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointScores {
    pub type_id: usize,
    pub narrowing: Option<u32>,
    pub erosion: Option<u32>,
}

struct Glyph {
    cx: f64,
    cy: f64,
    sin: f64,
    cos: f64,
    half_len: f64,
    half_gap: f64,
    notch: f64,
}

impl Glyph {
    /// Whether `(x, y)` lies on a bar and outside the notch.
    fn covers(&self, x: f64, y: f64, cfg: &SynthConfig) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = self.cos * dx + self.sin * dy;
        let across = -self.sin * dx + self.cos * dy;
        if along.abs() > self.half_len {
            return false;
        }
        let depth = across.abs() - self.half_gap;
        if !(0.0..=cfg.bar_width).contains(&depth) {
            return false;
        }
        if across < 0.0 && self.notch > 0.0 {
            // notch centered on the far end of the upper bar
            let nu = across + self.half_gap + cfg.bar_width / 2.0;
            let nv = along - self.half_len;
            if nu * nu + nv * nv < self.notch * self.notch {
                return false;
            }
        }
        true
    }

    fn corners(&self, cfg: &SynthConfig) -> [(f64, f64); 4] {
        let a = self.half_len;
        let b = self.half_gap + cfg.bar_width;
        [(-a, -b), (a, -b), (a, b), (-a, b)].map(|(v, u)| {
            (self.cx + self.cos * v - self.sin * u, self.cy + self.sin * v + self.cos * u)
        })
    }
}

/// Renders one limb image. Jitter and tilt are drawn per joint before the
/// noise, so they do not depend on the grades.
pub fn render_image<R: Rng + ?Sized>(
    rng: &mut R,
    limb: Limb,
    side: Side,
    scores: &[JointScores],
    schema: &JointSchema,
    cfg: &SynthConfig,
) -> Result<AnnotatedImage> {
    let (h, w) = cfg.canvas;
    let layout = cfg.layout(limb);
    let slots = schema.joints_for(limb);
    let erosion_max = f64::from(score_range(Task::Erosion, limb).max);
    let mut glyphs = Vec::with_capacity(scores.len());
    for s in scores {
        let slot = slots.iter().position(|&id| id == s.type_id).ok_or_else(|| {
            Error::InvalidAnnotation(format!("joint type {} does not occur on a {limb:?}", s.type_id))
        })?;
        let (gx, gy) = layout[slot];
        let jx = cfg.max_jitter * (2.0 * rng.gen::<f64>() - 1.0);
        let jy = cfg.max_jitter * (2.0 * rng.gen::<f64>() - 1.0);
        let tilt = cfg.max_tilt_deg * (2.0 * rng.gen::<f64>() - 1.0);
        let (sin, cos) = tilt.to_radians().sin_cos();
        let glyph = Glyph {
            cx: gx + jx,
            cy: gy + jy,
            sin,
            cos,
            half_len: cfg.bar_length(limb) / 2.0,
            half_gap: cfg.gap(s.narrowing.unwrap_or(0)) / 2.0,
            notch: cfg.notch_radius(f64::from(s.erosion.unwrap_or(0)) / erosion_max),
        };
        for (x, y) in glyph.corners(cfg) {
            if x < 0.0 || y < 0.0 || x > w as f64 - 1.0 || y > h as f64 - 1.0 {
                return Err(Error::GeometryOverflow { joint: s.type_id, h, w });
            }
        }
        glyphs.push(glyph);
    }

    let ramp = |c: usize| (cfg.tissue_ramp * (1.0 - c as f64 / (w as f64 - 1.0).max(1.0))) as f32;
    let mut canonical = GrayImage::from_fn(h, w, |_, c| ramp(c));
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for g in &glyphs {
        let r0 = (g.cy - g.half_len * 2.0 - cfg.bar_width - g.half_gap).floor().max(0.0) as usize;
        let r1 = ((g.cy + g.half_len * 2.0 + cfg.bar_width + g.half_gap).ceil() as usize).min(h - 1);
        let c0 = (g.cx - g.half_len * 2.0 - cfg.bar_width - g.half_gap).floor().max(0.0) as usize;
        let c1 = ((g.cx + g.half_len * 2.0 + cfg.bar_width + g.half_gap).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let mut hits = 0usize;
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let y = r as f64 - 0.5 + (si as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = c as f64 - 0.5 + (sj as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += usize::from(g.covers(x, y, cfg));
                    }
                }
                let v = (cfg.intensity * hits as f64 / n_sub) as f32;
                if v > canonical.get(r, c) {
                    canonical.set(r, c, v);
                }
            }
        }
    }

    let mirror = side == Side::Left;
    let mut pixels = if mirror {
        GrayImage::from_fn(h, w, |r, c| canonical.get(r, w - 1 - c))
    } else {
        canonical
    };
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in pixels.data_mut() {
            *v = (f64::from(*v) + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    for v in pixels.data_mut() {
        *v = quantize16(*v);
    }

    let joints = scores
        .iter()
        .zip(&glyphs)
        .map(|(s, g)| JointAnnotation {
            type_id: s.type_id,
            x: if mirror { w as f64 - 1.0 - g.cx } else { g.cx },
            y: g.cy,
            narrowing: s.narrowing.map(i64::from),
            erosion: s.erosion.map(i64::from),
        })
        .collect();
    Ok(AnnotatedImage {
        pixels,
        limb,
        side,
        joints,
    })
}

/// Rounds to the nearest 16-bit level so in-memory images equal their PNG form.
pub fn quantize16(v: f32) -> f32 {
    dataset::level_to_unit(dataset::unit_to_level(v))
}

pub fn patient_id(index: usize, n_patients: usize) -> String {
    let width = n_patients.saturating_sub(1).to_string().len().max(3);
    format!("P{index:0width$}")
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws scores for every joint on `limb` according to the schema.
pub fn sample_joint_scores<R: Rng + ?Sized>(rng: &mut R, limb: Limb, schema: &JointSchema, cfg: &SynthConfig) -> Vec<JointScores> {
    schema
        .joints_for(limb)
        .into_iter()
        .map(|id| {
            let mut draw = |task| {
                schema
                    .is_scored(id, limb, task)
                    .then(|| sample_scores(rng, task, limb, cfg))
            };
            let narrowing = draw(Task::Narrowing);
            let erosion = draw(Task::Erosion);
            JointScores {
                type_id: id,
                narrowing,
                erosion,
            }
        })
        .collect()
}

/// One patient, reproducible from `(cfg.seed, index)` alone.
pub fn generate_patient(index: usize, schema: &JointSchema, cfg: &SynthConfig) -> Result<PatientRecord> {
    let mut rng = patient_rng(cfg.seed, index);
    let mut images = BTreeMap::new();
    for key in ImageKey::ALL {
        let scores = sample_joint_scores(&mut rng, key.limb(), schema, cfg);
        let img = render_image(&mut rng, key.limb(), key.side(), &scores, schema, cfg)?;
        images.insert(key, img);
    }
    PatientRecord::new(patient_id(index, cfg.n_patients), images)
}

/// All patients in memory, sorted by id.
pub fn generate_records(schema: &JointSchema, cfg: &SynthConfig) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    use rayon::prelude::*;
    (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(i, schema, cfg))
        .collect()
}

/// Writes the synthetic cohort to `dir` as PNG images plus one annotation
/// JSON per patient.
pub fn generate_dataset(schema: &JointSchema, cfg: &SynthConfig, dir: &Path) -> Result<Vec<PatientRecord>> {
    let records = generate_records(schema, cfg)?;
    dataset::save_records(dir, &records)?;
    Ok(records)
}
