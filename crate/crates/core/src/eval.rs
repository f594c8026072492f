//! RMSE metrics, the constant-mean baseline and the ablation harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{predict_records, PatientPrediction};
use crate::model::NetworkConfig;
use crate::schema::{JointSchema, PatientRecord, Task};
use crate::targets::{MaskConfig, SmoothingConfig};
use crate::train::{fit, split_records, TrainConfig};

pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let sse: f64 = pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub narrowing: usize,
    pub erosion: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_narrowing: f64,
    pub rmse_erosion: f64,
    pub mean_center_error_px: f64,
    pub n_joints_scored: TaskCounts,
}

impl EvalReport {
    pub fn rmse(&self, task: Task) -> f64 {
        match task {
            Task::Narrowing => self.rmse_narrowing,
            Task::Erosion => self.rmse_erosion,
        }
    }
}

/// `(predicted, truth)` pairs for one task, pooled over every scored
/// (image, joint) in `truths`. Erosion truths are on the reported scale.
pub fn paired_scores(preds: &[PatientPrediction], truths: &[PatientRecord], task: Task) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for record in truths {
        let pred = preds.iter().find(|p| p.patient_id == record.patient_id);
        for (key, img) in &record.images {
            for joint in &img.joints {
                let Some(truth) = joint.score(task) else { continue };
                let predicted = pred
                    .and_then(|p| p.image(*key))
                    .and_then(|js| js.iter().find(|j| j.type_id == joint.type_id))
                    .and_then(|j| j.score(task))
                    .ok_or_else(|| Error::MissingPrediction {
                        image: format!("{}/{}", record.patient_id, key),
                        joint: joint.type_id,
                    })?;
                pairs.push((predicted, truth as f64));
            }
        }
    }
    Ok(pairs)
}

pub fn evaluate(preds: &[PatientPrediction], truths: &[PatientRecord]) -> Result<EvalReport> {
    let narrowing = paired_scores(preds, truths, Task::Narrowing)?;
    let erosion = paired_scores(preds, truths, Task::Erosion)?;
    let mut distances = Vec::new();
    for record in truths {
        let pred = preds.iter().find(|p| p.patient_id == record.patient_id);
        for (key, img) in &record.images {
            for joint in &img.joints {
                let p = pred
                    .and_then(|p| p.image(*key))
                    .and_then(|js| js.iter().find(|j| j.type_id == joint.type_id))
                    .ok_or_else(|| Error::MissingPrediction {
                        image: format!("{}/{}", record.patient_id, key),
                        joint: joint.type_id,
                    })?;
                distances.push((p.center.0 - joint.x).hypot(p.center.1 - joint.y));
            }
        }
    }
    Ok(EvalReport {
        rmse_narrowing: rmse(&narrowing)?,
        rmse_erosion: rmse(&erosion)?,
        mean_center_error_px: if distances.is_empty() {
            0.0
        } else {
            distances.iter().sum::<f64>() / distances.len() as f64
        },
        n_joints_scored: TaskCounts {
            narrowing: narrowing.len(),
            erosion: erosion.len(),
        },
    })
}

/// RMSE of predicting the truth's own mean for every joint, per task
/// (the population standard deviation of the truths).
pub fn constant_mean_baseline(truths: &[PatientRecord]) -> Result<(f64, f64)> {
    let baseline = |task: Task| -> Result<f64> {
        let values: Vec<f64> = truths
            .iter()
            .flat_map(|r| r.images.values())
            .flat_map(|img| img.joints.iter())
            .filter_map(|j| j.score(task))
            .map(|v| v as f64)
            .collect();
        if values.is_empty() {
            return Err(Error::EmptySet);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        rmse(&values.iter().map(|&v| (mean, v)).collect::<Vec<_>>())
    };
    Ok((baseline(Task::Narrowing)?, baseline(Task::Erosion)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    P,
    R,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::P => "p",
            SweepParam::R => "r",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::P => vec![0.0, 0.05, 0.1, 0.2],
            SweepParam::R => vec![16.0, 24.0, 32.0, 40.0],
        }
    }

    /// Outer radius held fixed during an `r` sweep.
    pub const FIXED_BIG_R: f64 = 40.0;

    /// `base` with the swept parameter set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::P => cfg.smoothing = SmoothingConfig::new(value)?,
            SweepParam::R => cfg.mask = MaskConfig::new(value, Self::FIXED_BIG_R)?,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: SweepParam,
    pub value: f64,
    pub seed: u64,
    pub rmse_narrowing: f64,
    pub rmse_erosion: f64,
}

impl AblationRow {
    /// Mean of the two task RMSEs; the single number the sweeps are compared on.
    pub fn combined(&self) -> f64 {
        (self.rmse_narrowing + self.rmse_erosion) / 2.0
    }
}

/// Trains one model per `(value, seed)` with everything else fixed and
/// scores it on the validation fold. Rows come back value-major.
pub fn ablate(
    records: &[PatientRecord],
    schema: &JointSchema,
    network: &NetworkConfig,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let cells: Vec<(f64, u64)> = values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let configs = cells
        .iter()
        .map(|&(v, s)| {
            let mut cfg = param.apply(base, v)?;
            cfg.seed = s;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, val) = split_records(records, base.n_folds, base.val_fold)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (&(value, seed), cfg) in cells.iter().zip(&configs) {
        log::info!("ablation cell {}={value} seed {seed}", param.as_str());
        let fitted = fit(records, schema, network, cfg)?;
        let preds = predict_records(std::slice::from_ref(&fitted.params), schema, &val)?;
        let report = evaluate(&preds, &val)?;
        rows.push(AblationRow {
            param,
            value,
            seed,
            rmse_narrowing: report.rmse_narrowing,
            rmse_erosion: report.rmse_erosion,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("param,value,seed,rmse_narrowing,rmse_erosion\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.param.as_str(),
            r.value,
            r.seed,
            r.rmse_narrowing,
            r.rmse_erosion
        );
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Per swept value: `(value, median, min, max)` of `metric` over seeds, in
/// first-appearance order.
pub fn summarize(rows: &[AblationRow], metric: impl Fn(&AblationRow) -> f64) -> Vec<(f64, f64, f64, f64)> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let m: Vec<f64> = rows.iter().filter(|r| r.value == v).map(&metric).collect();
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (v, median(&m).unwrap_or(f64::NAN), lo, hi)
        })
        .collect()
}

/// Line plot of median RMSE over seeds with a min-max band, one line per task.
pub fn ablation_svg(rows: &[AblationRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let series = [
        ("narrowing", "#1f77b4", summarize(rows, |r| r.rmse_narrowing)),
        ("erosion", "#d62728", summarize(rows, |r| r.rmse_erosion)),
    ];
    let xs: Vec<f64> = series[0].2.iter().map(|s| s.0).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (y0, y1) = series
        .iter()
        .flat_map(|s| s.2.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.2), b.max(s.3)));
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    let (y0, y1) = ((y0 - pad).max(0.0), y1 + pad);
    let sx = |x: f64| if x1 > x0 { M + (x - x0) / (x1 - x0) * (W - 2.0 * M) } else { W / 2.0 };
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let param = rows.first().map_or("?", |r| r.param.as_str());

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<path d=\"M{M},{M} V{} H{}\" fill=\"none\" stroke=\"black\"/>",
        H - M,
        W - M
    );
    for &x in &xs {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x}</text>",
            sx(x),
            H - M + 16.0
        );
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{y:.3}</text>",
            M - 4.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{param}</text>",
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(svg, "<text x=\"12\" y=\"{:.1}\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">validation RMSE</text>", H / 2.0, H / 2.0);
    for (k, (name, color, stats)) in series.iter().enumerate() {
        let upper: Vec<String> = stats.iter().map(|s| format!("{:.1},{:.1}", sx(s.0), sy(s.3))).collect();
        let lower: Vec<String> = stats.iter().rev().map(|s| format!("{:.1},{:.1}", sx(s.0), sy(s.2))).collect();
        let _ = writeln!(
            svg,
            "<polygon points=\"{} {}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = stats.iter().map(|s| format!("{:.1},{:.1}", sx(s.0), sy(s.1))).collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            line.join(" ")
        );
        for s in stats {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", sx(s.0), sy(s.1));
        }
        let ly = M - 24.0 + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" fill=\"{color}\">{name} (median, min-max)</text>",
            W - M - 150.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[(1.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(rmse(&[(2.0, 2.0), (3.0, 3.0)]).unwrap(), 0.0);
        assert!(matches!(rmse(&[]), Err(Error::EmptySet)));
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let rows: Vec<AblationRow> = [0.0, 0.05]
            .iter()
            .flat_map(|&v| {
                (0..3).map(move |s| AblationRow {
                    param: SweepParam::P,
                    value: v,
                    seed: s,
                    rmse_narrowing: 0.5,
                    rmse_erosion: 0.25,
                })
            })
            .collect();
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[2], "p,0,1,0.500000,0.250000");
        assert_eq!(lines[4], "p,0.05,0,0.500000,0.250000");
        let svg = ablation_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn r_sweep_rejects_r_above_big_r() {
        let base = TrainConfig::default();
        assert!(SweepParam::R.apply(&base, 40.0).is_ok());
        assert!(SweepParam::R.apply(&base, 41.0).is_err());
    }
}
