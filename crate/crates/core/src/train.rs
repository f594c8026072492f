//! Deterministic training: fold split, OneCycle schedule, AdamW.
//!
//! Per-image gradients of a batch are computed in parallel and summed in
//! batch order, so the trajectory does not depend on the thread count.
//! All randomness (initialization, shuffling, augmentation) derives from
//! `TrainConfig::seed`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::image::{AnnotatedImage, GrayImage};
use crate::infer::predict_records;
use crate::model::{checkpoint, gradients, init_params, LossTerms, LossWeights, NetworkConfig, NetworkParams};
use crate::preprocess::{augment, AugmentRanges, AugmentSpec};
use crate::schema::{JointSchema, PatientRecord};
use crate::targets::{build_pixel_targets, MaskConfig, PixelTargets, SmoothingConfig};

/// Redraws allowed when an augmentation pushes a joint center off the canvas.
const AUGMENT_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub div_initial: f64,
    pub final_div: f64,
    pub pct_up: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub n_folds: usize,
    pub val_fold: usize,
    pub mask: MaskConfig,
    pub smoothing: SmoothingConfig,
    pub loss_weights: LossWeights,
    pub augment: AugmentRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            max_lr: 3e-3,
            div_initial: 25.0,
            final_div: 1e4,
            pct_up: 0.3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            n_folds: 8,
            val_fold: 0,
            mask: MaskConfig::default(),
            smoothing: SmoothingConfig::default(),
            loss_weights: LossWeights::default(),
            augment: AugmentRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return bad("max_lr must be positive");
        }
        if !(self.pct_up > 0.0 && self.pct_up < 1.0) {
            return bad("pct_up must lie strictly between 0 and 1");
        }
        if !(self.div_initial >= 1.0 && self.final_div >= 1.0) {
            return bad("div_initial and final_div must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("weight_decay must be non-negative and eps positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.n_folds < 2 || self.val_fold >= self.n_folds {
            return bad("need n_folds >= 2 and val_fold < n_folds");
        }
        self.mask.validate()?;
        self.smoothing.validate()?;
        self.loss_weights.validate()?;
        self.augment.validate()
    }
}

/// Sorted-index-mod-`n_folds` split: returns `(train, val)` ids, both sorted.
pub fn split_folds(patient_ids: &[String], n_folds: usize, val_fold: usize) -> Result<(Vec<String>, Vec<String>)> {
    if n_folds < 2 || val_fold >= n_folds {
        return Err(Error::InvalidConfig(format!("bad fold setup: {n_folds} folds, validation fold {val_fold}")));
    }
    let mut ids = patient_ids.to_vec();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidAnnotation(format!("duplicate patient id {}", w[0])));
    }
    if ids.len() < n_folds {
        return Err(Error::TooFewPatients {
            patients: ids.len(),
            folds: n_folds,
        });
    }
    let (val, train): (Vec<_>, Vec<_>) = ids.into_iter().enumerate().partition(|(i, _)| i % n_folds == val_fold);
    Ok((train.into_iter().map(|p| p.1).collect(), val.into_iter().map(|p| p.1).collect()))
}

/// [`split_folds`] applied to whole patient records.
pub fn split_records(records: &[PatientRecord], n_folds: usize, val_fold: usize) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let (train_ids, val_ids) = split_folds(&ids, n_folds, val_fold)?;
    let pick = |wanted: &[String]| -> Vec<PatientRecord> {
        wanted
            .iter()
            .filter_map(|id| records.iter().find(|r| &r.patient_id == id).cloned())
            .collect()
    };
    Ok((pick(&train_ids), pick(&val_ids)))
}

/// OneCycle learning rate at training fraction `t`: cosine warm-up from
/// `max_lr / div_initial` to `max_lr` over `[0, pct_up]`, then cosine
/// annealing to `max_lr / (div_initial * final_div)`.
pub fn lr_at(t: f64, cfg: &TrainConfig) -> f64 {
    let t = t.clamp(0.0, 1.0);
    let start = cfg.max_lr / cfg.div_initial;
    let end = start / cfg.final_div;
    let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (PI * frac).cos()) / 2.0;
    if t <= cfg.pct_up {
        cos_interp(start, cfg.max_lr, t / cfg.pct_up)
    } else {
        cos_interp(cfg.max_lr, end, (t - cfg.pct_up) / (1.0 - cfg.pct_up))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams<f32>) -> Self {
        OptimizerState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay on
/// weights only: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_update(params: &mut NetworkParams<f32>, opt: &mut OptimizerState, grads: &[f32], lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            opt.m.len(),
            params.len()
        )));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let specs = params.specs().to_vec();
    let flat = params.flat_mut();
    for spec in &specs {
        let decay = if spec.role.decays() { cfg.weight_decay } else { 0.0 };
        for i in spec.offset..spec.offset + spec.len {
            let g = f64::from(grads[i]);
            let m = b1 * f64::from(opt.m[i]) + (1.0 - b1) * g;
            let v = b2 * f64::from(opt.v[i]) + (1.0 - b2) * g * g;
            opt.m[i] = m as f32;
            opt.v[i] = v as f32;
            let theta = f64::from(flat[i]);
            let step = (m / c1) / ((v / c2).sqrt() + cfg.eps) + decay * theta;
            flat[i] = (theta - lr * step) as f32;
        }
    }
    Ok(())
}

/// Mean loss and mean gradient over a batch. Images are processed in
/// parallel; the sum runs in batch order.
pub fn batch_gradients(params: &NetworkParams<f32>, batch: &[(GrayImage, PixelTargets)], weights: &LossWeights) -> Result<(LossTerms, Vec<f32>)> {
    if batch.is_empty() {
        return Err(Error::EmptySet);
    }
    let per_image = batch
        .par_iter()
        .map(|(img, tgt)| gradients(params, img, tgt, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0f32; params.len()];
    let mut mean = LossTerms::default();
    let n = batch.len() as f64;
    for (terms, g) in &per_image {
        mean.total += terms.total / n;
        mean.seg += terms.seg / n;
        mean.narrowing += terms.narrowing / n;
        mean.erosion += terms.erosion / n;
        for (c, k) in mean.counts.iter_mut().zip(terms.counts) {
            *c += k;
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    sum.iter_mut().for_each(|s| *s /= n as f32);
    Ok((mean, sum))
}

/// Gradient of the batch followed by one AdamW update; returns the mean
/// loss terms of the batch.
pub fn train_step(
    params: &mut NetworkParams<f32>,
    opt: &mut OptimizerState,
    batch: &[(GrayImage, PixelTargets)],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let (loss, grads) = batch_gradients(params, batch, &cfg.loss_weights)?;
    if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            step: opt.step as usize,
            detail: format!("batch loss {loss:?}"),
        });
    }
    adamw_update(params, opt, &grads, lr, cfg)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse_narrowing: f64,
    pub val_rmse_erosion: f64,
    pub lr: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,val_rmse_narrowing,val_rmse_erosion,lr\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6e}",
            m.epoch, m.train_loss, m.val_rmse_narrowing, m.val_rmse_erosion, m.lr
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: NetworkParams<f32>,
    pub metrics: Vec<EpochMetrics>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is left to initialization
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn draw_augmented<R: rand::Rng>(rng: &mut R, image: &AnnotatedImage, ranges: &AugmentRanges) -> Result<AnnotatedImage> {
    for _ in 0..AUGMENT_RETRIES {
        let spec = ranges.sample(rng);
        match augment(image, &spec) {
            Err(Error::CenterLost { .. }) => continue,
            other => return other,
        }
    }
    augment(image, &AugmentSpec::identity())
}

/// Trains on `train` and reports validation RMSE on `val` after every epoch.
pub fn fit_split(
    train: &[PatientRecord],
    val: &[PatientRecord],
    schema: &JointSchema,
    network: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut params = init_params(network, cfg.seed)?;
    let mut opt = OptimizerState::new(&params);
    let images_per_epoch: usize = train.iter().map(|r| r.images.len()).sum();
    let steps_per_epoch = images_per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let images: Vec<&AnnotatedImage> = order.iter().flat_map(|&i| train[i].images.values()).collect();
        let augmented = images
            .iter()
            .map(|img| draw_augmented(&mut rng, img, &cfg.augment))
            .collect::<Result<Vec<_>>>()?;

        let mut loss_sum = LossTerms::default();
        let mut lr = 0.0;
        for chunk in augmented.chunks(cfg.batch_size) {
            let batch = chunk
                .par_iter()
                .map(|img| Ok((img.pixels.clone(), build_pixel_targets(img, schema, &cfg.mask, &cfg.smoothing)?)))
                .collect::<Result<Vec<_>>>()?;
            lr = lr_at(global_step as f64 / total_steps.saturating_sub(1).max(1) as f64, cfg);
            let loss = train_step(&mut params, &mut opt, &batch, lr, cfg).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    detail,
                },
                other => other,
            })?;
            let k = chunk.len() as f64;
            loss_sum.total += loss.total * k;
            loss_sum.seg += loss.seg * k;
            loss_sum.narrowing += loss.narrowing * k;
            loss_sum.erosion += loss.erosion * k;
            global_step += 1;
        }

        let (rn, re) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let preds = predict_records(std::slice::from_ref(&params), schema, val)?;
            let report = evaluate(&preds, val)?;
            (report.rmse_narrowing, report.rmse_erosion)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum.total / images_per_epoch as f64,
            val_rmse_narrowing: rn,
            val_rmse_erosion: re,
            lr,
        };
        log::info!(
            "epoch {:>3}  loss {:.4}  val rmse narrowing {:.4} erosion {:.4}  lr {:.2e}",
            m.epoch,
            m.train_loss,
            rn,
            re,
            lr
        );
        log::debug!(
            "epoch {:>3}  seg {:.4}  narrowing {:.4}  erosion {:.4}",
            m.epoch,
            loss_sum.seg / images_per_epoch as f64,
            loss_sum.narrowing / images_per_epoch as f64,
            loss_sum.erosion / images_per_epoch as f64
        );
        metrics.push(m);
    }
    Ok(FitResult { params, metrics })
}

/// Splits `records` by fold and trains on the training part.
pub fn fit(records: &[PatientRecord], schema: &JointSchema, network: &NetworkConfig, cfg: &TrainConfig) -> Result<FitResult> {
    let (train, val) = split_records(records, cfg.n_folds, cfg.val_fold)?;
    fit_split(&train, &val, schema, network, cfg)
}

/// Paths written by [`fit_to_dir`].
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub result: FitResult,
}

/// [`fit`], then writes `model.svhc` and `metrics.csv` into `out_dir`.
pub fn fit_to_dir(
    records: &[PatientRecord],
    schema: &JointSchema,
    network: &NetworkConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitArtifacts> {
    let result = fit(records, schema, network, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join("model.svhc");
    let metadata = serde_json::json!({ "train": cfg, "epochs_completed": result.metrics.len() });
    checkpoint::save(&checkpoint, &result.params, &metadata)?;
    let metrics = out_dir.join("metrics.csv");
    std::fs::write(&metrics, metrics_csv(&result.metrics)).map_err(|e| Error::io(&metrics, e))?;
    Ok(FitArtifacts {
        checkpoint,
        metrics,
        result,
    })
}
