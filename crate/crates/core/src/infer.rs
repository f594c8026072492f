//! Per-joint expected scores from per-pixel softmaxes, plus ensembling.
//!
//! For joint `j`, `S_j` is the set of pixels whose segmentation argmax is
//! `j`. The joint's damage distribution is the mean softmax over `S_j`;
//! when `S_j` is empty the mean is weighted by `P(seg = j)` over the whole
//! image instead. Expected scores are then decoded as `sum_c c * p_c`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::AnnotatedImage;
use crate::model::{forward, HeadLogits, NetworkParams};
use crate::schema::{score_range, ImageKey, JointSchema, Limb, PatientRecord, Task, EROSION_CLASSES, NARROWING_CLASSES};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointPrediction {
    pub type_id: usize,
    pub expected_narrowing: Option<f64>,
    /// Reported scale: already doubled for feet.
    pub expected_erosion: Option<f64>,
    pub center: (f64, f64),
    /// Pixels assigned to this joint by the segmentation argmax.
    pub support: usize,
}

impl JointPrediction {
    pub fn score(&self, task: Task) -> Option<f64> {
        match task {
            Task::Narrowing => self.expected_narrowing,
            Task::Erosion => self.expected_erosion,
        }
    }

    fn clamped(mut self, limb: Limb) -> Self {
        let clamp = |v: Option<f64>, task| v.map(|v| v.clamp(0.0, f64::from(score_range(task, limb).max)));
        self.expected_narrowing = clamp(self.expected_narrowing, Task::Narrowing);
        self.expected_erosion = clamp(self.expected_erosion, Task::Erosion);
        self
    }
}

/// `sum_c c * dist[c]`.
pub fn decode_expected(dist: &[f64]) -> Result<f64> {
    let total: f64 = dist.iter().sum();
    if !((total - 1.0).abs() <= NORMALIZATION_TOLERANCE) || dist.iter().any(|&p| p < 0.0) {
        return Err(Error::NotNormalized(total));
    }
    Ok(dist.iter().enumerate().map(|(c, &p)| c as f64 * p).sum())
}

fn softmax_planes(logits: &[f32], k: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * pixels];
    for px in 0..pixels {
        let max = (0..k).map(|c| f64::from(logits[c * pixels + px])).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (f64::from(logits[c * pixels + px]) - max).exp();
            out[c * pixels + px] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * pixels + px] /= sum;
        }
    }
    out
}

/// Predictions before clamping; ensembles average these.
fn predict_unclamped(logits: &HeadLogits<f32>, schema: &JointSchema, limb: Limb) -> Result<Vec<JointPrediction>> {
    let (h, w) = (logits.height, logits.width);
    let n = h * w;
    let k_seg = schema.num_classes();
    let seg = softmax_planes(&logits.seg, k_seg, n);
    let narrowing = softmax_planes(&logits.narrowing, NARROWING_CLASSES, n);
    let erosion = softmax_planes(&logits.erosion, EROSION_CLASSES, n);
    let argmax: Vec<usize> = (0..n)
        .map(|px| {
            (0..k_seg).fold(0, |best, c| if seg[c * n + px] > seg[best * n + px] { c } else { best })
        })
        .collect();

    let pooled = |probs: &[f64], k: usize, weights: &[(usize, f64)]| -> Result<f64> {
        let total: f64 = weights.iter().map(|&(_, wt)| wt).sum();
        let mut dist = vec![0.0; k];
        for &(px, wt) in weights {
            for (c, d) in dist.iter_mut().enumerate() {
                *d += wt * probs[c * n + px];
            }
        }
        dist.iter_mut().for_each(|d| *d /= total);
        decode_expected(&dist)
    };

    let mut out = Vec::new();
    for id in schema.joints_for(limb) {
        let assigned: Vec<(usize, f64)> = (0..n).filter(|&px| argmax[px] == id).map(|px| (px, 1.0)).collect();
        let support = assigned.len();
        let weights = if support > 0 {
            assigned
        } else {
            (0..n).map(|px| (px, seg[id * n + px])).collect()
        };
        let center_weights: Vec<(usize, f64)> = weights.iter().map(|&(px, _)| (px, seg[id * n + px])).collect();
        let mass: f64 = center_weights.iter().map(|&(_, wt)| wt).sum();
        let center = if mass > 0.0 {
            let (sx, sy) = center_weights.iter().fold((0.0, 0.0), |(sx, sy), &(px, wt)| {
                (sx + wt * (px % w) as f64, sy + wt * (px / w) as f64)
            });
            (sx / mass, sy / mass)
        } else {
            ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
        };
        let expected_narrowing = if schema.is_scored(id, limb, Task::Narrowing) {
            Some(pooled(&narrowing, NARROWING_CLASSES, &weights)?)
        } else {
            None
        };
        let expected_erosion = if schema.is_scored(id, limb, Task::Erosion) {
            let internal = pooled(&erosion, EROSION_CLASSES, &weights)?;
            Some(match limb {
                Limb::Hand => internal,
                Limb::Foot => 2.0 * internal,
            })
        } else {
            None
        };
        out.push(JointPrediction {
            type_id: id,
            expected_narrowing,
            expected_erosion,
            center,
            support,
        });
    }
    Ok(out)
}

/// Decodes already-computed logits, with scores clamped to their legal ranges.
pub fn decode_logits(logits: &HeadLogits<f32>, schema: &JointSchema, limb: Limb) -> Result<Vec<JointPrediction>> {
    Ok(predict_unclamped(logits, schema, limb)?.into_iter().map(|p| p.clamped(limb)).collect())
}

/// Runs the network on one preprocessed image and decodes every joint of its limb.
pub fn predict_image(params: &NetworkParams<f32>, schema: &JointSchema, image: &AnnotatedImage) -> Result<Vec<JointPrediction>> {
    decode_logits(&forward(params, &image.pixels)?, schema, image.limb)
}

/// Mean of the members' unclamped expected scores and centers, then clamped.
pub fn ensemble_predict(members: &[NetworkParams<f32>], schema: &JointSchema, image: &AnnotatedImage) -> Result<Vec<JointPrediction>> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let per_member = members
        .iter()
        .map(|m| predict_unclamped(&forward(m, &image.pixels)?, schema, image.limb))
        .collect::<Result<Vec<_>>>()?;
    let n = members.len() as f64;
    let mut out = per_member[0].clone();
    for (i, joint) in out.iter_mut().enumerate() {
        let mean = |f: &dyn Fn(&JointPrediction) -> f64| per_member.iter().map(|m| f(&m[i])).sum::<f64>() / n;
        joint.expected_narrowing = joint.expected_narrowing.map(|_| mean(&|p| p.expected_narrowing.unwrap_or(0.0)));
        joint.expected_erosion = joint.expected_erosion.map(|_| mean(&|p| p.expected_erosion.unwrap_or(0.0)));
        joint.center = (mean(&|p| p.center.0), mean(&|p| p.center.1));
        joint.support = (per_member.iter().map(|m| m[i].support).sum::<usize>() as f64 / n).round() as usize;
    }
    Ok(out.into_iter().map(|p| p.clamped(image.limb)).collect())
}

/// Predictions for all four images of one patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub images: Vec<(ImageKey, Vec<JointPrediction>)>,
}

impl PatientPrediction {
    pub fn image(&self, key: ImageKey) -> Option<&[JointPrediction]> {
        self.images.iter().find(|(k, _)| *k == key).map(|(_, p)| p.as_slice())
    }
}

/// Predicts every image of every record with a single model or an ensemble,
/// parallel over images.
pub fn predict_records(members: &[NetworkParams<f32>], schema: &JointSchema, records: &[PatientRecord]) -> Result<Vec<PatientPrediction>> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let jobs: Vec<(usize, ImageKey, &AnnotatedImage)> = records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.images.iter().map(move |(k, img)| (i, *k, img)))
        .collect();
    let preds = jobs
        .par_iter()
        .map(|&(_, _, img)| match members {
            [single] => predict_image(single, schema, img),
            _ => ensemble_predict(members, schema, img),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<PatientPrediction> = records
        .iter()
        .map(|r| PatientPrediction {
            patient_id: r.patient_id.clone(),
            images: Vec::new(),
        })
        .collect();
    for ((i, key, _), p) in jobs.into_iter().zip(preds) {
        out[i].images.push((key, p));
    }
    Ok(out)
}

/// `patient_id,image,joint,task,predicted[,truth]`, one row per scored
/// (image, joint, task). The truth column appears when `truths` is given.
pub fn prediction_csv(preds: &[PatientPrediction], truths: Option<&[PatientRecord]>) -> String {
    let mut out = String::from("patient_id,image,joint,task,predicted");
    if truths.is_some() {
        out.push_str(",truth");
    }
    out.push('\n');
    for p in preds {
        let record = truths.and_then(|t| t.iter().find(|r| r.patient_id == p.patient_id));
        for (key, joints) in &p.images {
            for j in joints {
                for task in Task::ALL {
                    let Some(v) = j.score(task) else { continue };
                    let _ = write!(out, "{},{},{},{},{:.4}", p.patient_id, key, j.type_id, task, v);
                    if truths.is_some() {
                        let truth = record
                            .and_then(|r| r.images.get(key))
                            .and_then(|img| img.joint(j.type_id))
                            .and_then(|a| a.score(task));
                        if let Some(t) = truth {
                            let _ = write!(out, ",{t}");
                        } else {
                            out.push(',');
                        }
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_examples() {
        assert!((decode_expected(&[0.2; 5]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(decode_expected(&[0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), 3.0);
        assert!((decode_expected(&[0.1, 0.2, 0.3, 0.2, 0.2]).unwrap() - 2.2).abs() < 1e-12);
        assert!(matches!(decode_expected(&[0.5, 0.4]), Err(Error::NotNormalized(_))));
    }

    fn constant_logits(h: usize, w: usize, seg_class: usize, erosion_class: usize) -> HeadLogits<f32> {
        let n = h * w;
        let mut seg = vec![0.0; 22 * n];
        seg[seg_class * n..(seg_class + 1) * n].iter_mut().for_each(|v| *v = 40.0);
        let mut erosion = vec![0.0; 6 * n];
        erosion[erosion_class * n..(erosion_class + 1) * n].iter_mut().for_each(|v| *v = 40.0);
        HeadLogits {
            height: h,
            width: w,
            seg,
            narrowing: vec![0.0; 5 * n],
            erosion,
        }
    }

    #[test]
    fn background_everywhere_uses_fallback() {
        let schema = JointSchema::default();
        let preds = decode_logits(&constant_logits(4, 5, 21, 0), &schema, Limb::Hand).unwrap();
        assert_eq!(preds.len(), 21);
        for p in &preds {
            assert_eq!(p.support, 0);
            assert!(p.center.0.is_finite() && p.center.1.is_finite());
        }
        // uniform narrowing softmax decodes to the middle grade
        assert!((preds[0].expected_narrowing.unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn foot_erosion_is_doubled_and_clamped() {
        let schema = JointSchema::default();
        let preds = decode_logits(&constant_logits(3, 3, 0, 5), &schema, Limb::Foot).unwrap();
        assert_eq!(preds[0].support, 9);
        assert!((preds[0].expected_erosion.unwrap() - 10.0).abs() < 1e-9);
        let hand = decode_logits(&constant_logits(3, 3, 0, 5), &schema, Limb::Hand).unwrap();
        assert!((hand[0].expected_erosion.unwrap() - 5.0).abs() < 1e-9);
    }
}
