//! In-memory grayscale images and their joint annotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{score_range, ImageKey, JointSchema, Limb, Side, Task};

/// Row-major grayscale grid with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        GrayImage { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Bilinear sample at continuous `(x, y)` = (column, row); reads outside
    /// the grid contribute 0.
    pub fn sample_bilinear_zero(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let read = |r: i64, c: i64| -> f64 {
            if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
                0.0
            } else {
                f64::from(self.data[r as usize * self.width + c as usize])
            }
        };
        let top = read(y0, x0) * (1.0 - fx) + read(y0, x0 + 1) * fx;
        let bottom = read(y0 + 1, x0) * (1.0 - fx) + read(y0 + 1, x0 + 1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }
}

/// One annotated joint. Centers are in pixel coordinates with pixel
/// `(row, col)` centered at `(x = col, y = row)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAnnotation {
    #[serde(rename = "type")]
    pub type_id: usize,
    pub x: f64,
    pub y: f64,
    pub narrowing: Option<i64>,
    pub erosion: Option<i64>,
}

impl JointAnnotation {
    pub fn score(&self, task: Task) -> Option<i64> {
        match task {
            Task::Narrowing => self.narrowing,
            Task::Erosion => self.erosion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: GrayImage,
    pub limb: Limb,
    pub side: Side,
    pub joints: Vec<JointAnnotation>,
}

impl AnnotatedImage {
    pub fn key(&self) -> ImageKey {
        ImageKey::from_parts(self.limb, self.side)
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn joint(&self, type_id: usize) -> Option<&JointAnnotation> {
        self.joints.iter().find(|j| j.type_id == type_id)
    }

    /// Checks joint ids, center bounds and score ranges against `schema`.
    pub fn validate(&self, schema: &JointSchema) -> Result<()> {
        let (h, w) = (self.height() as f64, self.width() as f64);
        let allowed = schema.joints_for(self.limb);
        let mut seen = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            if !allowed.contains(&j.type_id) {
                return Err(Error::InvalidAnnotation(format!(
                    "joint type {} is not valid on a {:?}",
                    j.type_id, self.limb
                )));
            }
            if seen.contains(&j.type_id) {
                return Err(Error::InvalidAnnotation(format!("joint type {} annotated twice", j.type_id)));
            }
            seen.push(j.type_id);
            if !(j.x >= 0.0 && j.x <= w - 1.0 && j.y >= 0.0 && j.y <= h - 1.0) {
                return Err(Error::InvalidAnnotation(format!(
                    "joint {} center ({}, {}) outside the {}x{} image",
                    j.type_id,
                    j.x,
                    j.y,
                    self.height(),
                    self.width()
                )));
            }
            for task in Task::ALL {
                if let Some(v) = j.score(task) {
                    let range = score_range(task, self.limb);
                    if !schema.is_scored(j.type_id, self.limb, task) || !range.contains(v) {
                        return Err(Error::ScoreOutOfRange {
                            joint: j.type_id,
                            task: task.as_str(),
                            value: v,
                            max: range.max,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_grid_points_exactly() {
        let img = GrayImage::from_fn(4, 5, |r, c| (r * 5 + c) as f32 / 20.0);
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(img.sample_bilinear_zero(c as f64, r as f64), img.get(r, c));
            }
        }
        assert_eq!(img.sample_bilinear_zero(-1.0, 0.0), 0.0);
        let mid = img.sample_bilinear_zero(0.5, 0.0);
        assert!((mid - 0.025).abs() < 1e-7);
    }

    #[test]
    fn validate_rejects_out_of_range_scores() {
        let schema = JointSchema::default();
        let mut img = AnnotatedImage {
            pixels: GrayImage::zeros(8, 8),
            limb: Limb::Hand,
            side: Side::Left,
            joints: vec![JointAnnotation {
                type_id: 0,
                x: 3.0,
                y: 3.0,
                narrowing: Some(4),
                erosion: Some(5),
            }],
        };
        img.validate(&schema).unwrap();
        img.joints[0].erosion = Some(6);
        assert!(matches!(img.validate(&schema), Err(Error::ScoreOutOfRange { .. })));
        img.limb = Limb::Foot;
        img.validate(&schema).unwrap();
        img.joints[0].x = 8.0;
        assert!(matches!(img.validate(&schema), Err(Error::InvalidAnnotation(_))));
    }
}
