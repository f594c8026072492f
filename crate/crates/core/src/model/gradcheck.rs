//! Central finite-difference check of the analytic gradients.
//!
//! Only `forward` and `loss` are used on the numeric side, so the check is
//! independent of the reverse pass it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{loss, LossWeights};
use super::network::{forward, gradients};
use super::params::{init_params, NetworkConfig, NetworkParams};
use crate::error::Result;
use crate::image::{AnnotatedImage, GrayImage, JointAnnotation};
use crate::schema::{JointSchema, Limb, Side};
use crate::targets::{build_pixel_targets, MaskConfig, PixelTargets, SmoothingConfig};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// The small network used for gradient checks: one level, two base channels, 8x8.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        depth: 1,
        base_channels: 2,
        in_h: 8,
        in_w: 8,
        ..NetworkConfig::default()
    }
}

/// A deterministic 8x8 hand problem exercising joint, ignore and background
/// pixels plus both damage heads.
pub fn tiny_problem(seed: u64) -> Result<(GrayImage, PixelTargets)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = GrayImage::from_fn(8, 8, |_, _| rng.gen::<f32>());
    let joints = vec![
        JointAnnotation {
            type_id: 2,
            x: 1.5,
            y: 2.0,
            narrowing: Some(3),
            erosion: Some(0),
        },
        JointAnnotation {
            type_id: 11,
            x: 5.0,
            y: 5.5,
            narrowing: Some(1),
            erosion: None,
        },
        JointAnnotation {
            type_id: 17,
            x: 6.0,
            y: 1.0,
            narrowing: None,
            erosion: Some(5),
        },
    ];
    let image = AnnotatedImage {
        pixels,
        limb: Limb::Hand,
        side: Side::Right,
        joints,
    };
    let targets = build_pixel_targets(
        &image,
        &JointSchema::default(),
        &MaskConfig::new(1.5, 3.0)?,
        &SmoothingConfig::default(),
    )?;
    Ok((image.pixels, targets))
}

fn total_loss(params: &NetworkParams<f64>, image: &GrayImage, targets: &PixelTargets, w: &LossWeights) -> Result<f64> {
    let logits = forward(params, image)?;
    Ok(loss(&logits, targets, w)?.total)
}

/// Compares analytic gradients against central differences with step `h`
/// for every parameter, in double precision.
pub fn check(
    params: &NetworkParams<f64>,
    image: &GrayImage,
    targets: &PixelTargets,
    weights: &LossWeights,
    h: f64,
) -> Result<GradcheckReport> {
    let (_, analytic) = gradients(params, image, targets, weights)?;
    let mut probe = params.clone();
    let mut report = GradcheckReport {
        parameters: params.len(),
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for spec in params.specs() {
        for i in spec.offset..spec.offset + spec.len {
            let original = probe.flat()[i];
            probe.flat_mut()[i] = original + h;
            let plus = total_loss(&probe, image, targets, weights)?;
            probe.flat_mut()[i] = original - h;
            let minus = total_loss(&probe, image, targets, weights)?;
            probe.flat_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = err;
                report.worst_parameter = format!("{}[{}]", spec.name, i - spec.offset);
                report.worst_analytic = analytic[i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Full check on the tiny network with default loss weights.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let params = init_params(&tiny_config(), seed)?.cast::<f64>();
    let (image, targets) = tiny_problem(seed)?;
    check(&params, &image, &targets, &LossWeights::default(), DEFAULT_STEP)
}
