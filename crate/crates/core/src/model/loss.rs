use serde::{Deserialize, Serialize};

use super::network::HeadLogits;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::schema::{EROSION_CLASSES, NARROWING_CLASSES, NUM_SEG_CLASSES};
use crate::targets::{PixelTargets, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub narrowing: f64,
    pub erosion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            narrowing: 1.0,
            erosion: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.seg, self.narrowing, self.erosion];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite, non-negative and not all zero: {self:?}"
            )));
        }
        Ok(())
    }

    fn sum(&self) -> f64 {
        self.seg + self.narrowing + self.erosion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub seg: f64,
    pub narrowing: f64,
    pub erosion: f64,
    /// Supervised pixel counts for (seg, narrowing, erosion).
    pub counts: [usize; 3],
}

/// Normalized weighted average of the three per-term losses.
pub fn combine(seg: f64, narrowing: f64, erosion: f64, w: &LossWeights) -> f64 {
    (w.seg * seg + w.narrowing * narrowing + w.erosion * erosion) / w.sum()
}

/// Writes `softmax(logits[:, px])` into `probs` and returns its log-sum-exp.
#[inline]
fn softmax_at<T: Scalar>(logits: &[T], k: usize, p: usize, px: usize, probs: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for c in 0..k {
        max = max.max(logits[c * p + px].f64());
    }
    let mut sum = 0.0;
    for c in 0..k {
        let e = (logits[c * p + px].f64() - max).exp();
        probs[c] = e;
        sum += e;
    }
    for v in probs.iter_mut().take(k) {
        *v /= sum;
    }
    max + sum.ln()
}

/// Soft-target cross-entropy over the pixels accepted by `target_at`.
/// Returns `(mean loss, count)`; fills `grad` with `scale * (softmax - q) / count`.
fn soft_ce<T: Scalar>(
    logits: &[T],
    k: usize,
    p: usize,
    mut target_at: impl FnMut(usize, &mut [f64]) -> bool,
    grad: Option<(&mut [T], f64)>,
) -> (f64, usize) {
    let mut q = [0.0f64; NUM_SEG_CLASSES];
    let mut probs = [0.0f64; NUM_SEG_CLASSES];
    let mut total = 0.0;
    let mut selected = Vec::new();
    for px in 0..p {
        if !target_at(px, &mut q[..k]) {
            continue;
        }
        let lse = softmax_at(logits, k, p, px, &mut probs);
        let mut l = 0.0;
        for c in 0..k {
            if q[c] != 0.0 {
                l -= q[c] * (logits[c * p + px].f64() - lse);
            }
        }
        total += l;
        selected.push(px);
    }
    let n = selected.len();
    if n == 0 {
        return (0.0, 0);
    }
    if let Some((grad, scale)) = grad {
        let s = scale / n as f64;
        for &px in &selected {
            target_at(px, &mut q[..k]);
            softmax_at(logits, k, p, px, &mut probs);
            for c in 0..k {
                grad[c * p + px] = T::of(s * (probs[c] - q[c]));
            }
        }
    }
    (total / n as f64, n)
}

fn compute<T: Scalar>(
    logits: &HeadLogits<T>,
    targets: &PixelTargets,
    w: &LossWeights,
    grads: Option<&mut HeadLogits<T>>,
) -> Result<LossTerms> {
    w.validate()?;
    let p = logits.pixels();
    if targets.height != logits.height || targets.width != logits.width {
        return Err(Error::ShapeMismatch(format!(
            "targets are {}x{}, logits {}x{}",
            targets.height, targets.width, logits.height, logits.width
        )));
    }
    let norm = w.sum();
    let seg_target = |px: usize, q: &mut [f64]| {
        let class = targets.seg[px];
        if class == IGNORE {
            return false;
        }
        q.fill(0.0);
        q[class as usize] = 1.0;
        true
    };
    let narrowing_target = |px: usize, q: &mut [f64]| {
        if !targets.narrowing_valid[px] {
            return false;
        }
        q.copy_from_slice(targets.narrowing_at(px));
        true
    };
    let erosion_target = |px: usize, q: &mut [f64]| {
        if !targets.erosion_valid[px] {
            return false;
        }
        q.copy_from_slice(targets.erosion_at(px));
        true
    };

    let (gs, gn, ge) = match grads {
        Some(g) => (Some(&mut g.seg[..]), Some(&mut g.narrowing[..]), Some(&mut g.erosion[..])),
        None => (None, None, None),
    };
    let (seg, ns) = soft_ce(&logits.seg, NUM_SEG_CLASSES, p, seg_target, gs.map(|g| (g, w.seg / norm)));
    let (narrowing, nn) = soft_ce(
        &logits.narrowing,
        NARROWING_CLASSES,
        p,
        narrowing_target,
        gn.map(|g| (g, w.narrowing / norm)),
    );
    let (erosion, ne) = soft_ce(&logits.erosion, EROSION_CLASSES, p, erosion_target, ge.map(|g| (g, w.erosion / norm)));
    if ns + nn + ne == 0 {
        return Err(Error::NoSupervision);
    }
    Ok(LossTerms {
        total: combine(seg, narrowing, erosion, w),
        seg,
        narrowing,
        erosion,
        counts: [ns, nn, ne],
    })
}

/// Combined loss of one image's logits against its targets.
pub fn loss<T: Scalar>(logits: &HeadLogits<T>, targets: &PixelTargets, w: &LossWeights) -> Result<LossTerms> {
    compute(logits, targets, w, None)
}

pub(crate) fn loss_and_logit_grads<T: Scalar>(
    logits: &HeadLogits<T>,
    targets: &PixelTargets,
    w: &LossWeights,
) -> Result<(LossTerms, HeadLogits<T>)> {
    let mut grads = logits.zeros_like();
    let terms = compute(logits, targets, w, Some(&mut grads))?;
    // A zero-weight head gets exactly zero gradient rather than 0 * (p - q).
    for (weight, g) in [(w.seg, &mut grads.seg), (w.narrowing, &mut grads.narrowing), (w.erosion, &mut grads.erosion)] {
        if weight == 0.0 {
            g.fill(T::zero());
        }
    }
    Ok((terms, grads))
}
