//! Segmentation metrics and per-scale evaluation.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::ScaleModel;
use crate::error::{Error, Result};
use crate::pipeline::{run_baseline, run_pipeline, PipelineOptions};
use crate::train::TrainingScene;

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn add_labels(&mut self, truth: &[u16], predicted: &[u16]) {
        for (&t, &p) in truth.iter().zip(predicted) {
            self.add(t as usize, p as usize);
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Relabel classes: class `c` becomes `perm[c]` on both axes.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.num_classes);
        for t in 0..self.num_classes {
            for p in 0..self.num_classes {
                out.counts[perm[t] * self.num_classes + perm[p]] = self.get(t, p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub oacc: f64,
    pub macc: f64,
    pub miou: f64,
    /// `None` for classes excluded from the mean (empty ground-truth row).
    pub class_accuracy: Vec<Option<f64>>,
    /// `None` for classes absent from both truth and prediction.
    pub class_iou: Vec<Option<f64>>,
}

/// Overall accuracy, mean class accuracy and mean IoU.
///
/// Classes with no ground-truth points are left out of mAcc; classes absent
/// from both truth and prediction are left out of mIoU.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    let n = cm.num_classes();
    let trace: u64 = (0..n).map(|c| cm.get(c, c)).sum();
    let mut class_accuracy = Vec::with_capacity(n);
    let mut class_iou = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.get(c, c);
        let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..n).map(|t| cm.get(t, c)).sum();
        class_accuracy.push((row > 0).then(|| tp as f64 / row as f64));
        let union = row + col - tp;
        class_iou.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(Metrics {
        oacc: trace as f64 / total as f64,
        macc: mean(&class_accuracy),
        miou: mean(&class_iou),
        class_accuracy,
        class_iou,
    })
}

/// One row of a per-scale results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scale: usize,
    pub method: String,
    pub oacc: f64,
    pub macc: f64,
    pub miou: f64,
    /// Mean cumulative (upper-bound) latency in ms.
    pub time_ms: f64,
}

/// Per-scale metrics of the progressive pipeline.
///
/// Metrics at scale `i` are computed over every point predicted so far
/// (`Y_1 ∪ … ∪ Y_i`), i.e. the cloud at resolution `i`.
pub fn evaluate(
    models: &[ScaleModel],
    scenes: &[TrainingScene],
    fusion_enabled: bool,
) -> Result<Vec<MetricsRow>> {
    let num_scales = models.len();
    let num_classes = models
        .first()
        .map(|m| m.config.num_classes)
        .ok_or_else(|| Error::Empty("no models".into()))?;
    let mut cms = vec![ConfusionMatrix::new(num_classes); num_scales];
    let mut times = vec![0.0; num_scales];
    let opts = PipelineOptions {
        fusion_enabled,
        ..Default::default()
    };
    for scene in scenes {
        let truth = scene.cloud.labels().ok_or(Error::MissingLabels)?;
        let out = run_pipeline(models, &scene.cloud, &scene.parts, &opts)?;
        for (i, o) in out.outputs.iter().enumerate() {
            let gt: Vec<u16> = o.indices.iter().map(|&k| truth[k]).collect();
            for cm in &mut cms[i..] {
                cm.add_labels(&gt, &o.prediction.labels);
            }
            times[i] += out.report.scales[i].cumulative_ms;
        }
    }
    let method = if fusion_enabled { "Fusion" } else { "Without Fusion" };
    cms.iter()
        .enumerate()
        .map(|(i, cm)| {
            let m = compute_metrics(cm)?;
            Ok(MetricsRow {
                scale: i + 1,
                method: method.to_string(),
                oacc: m.oacc,
                macc: m.macc,
                miou: m.miou,
                time_ms: times[i] / scenes.len().max(1) as f64,
            })
        })
        .collect()
}

/// Metrics of a whole-cloud model on the union of partitions `1..=upto_scale`.
pub fn evaluate_baseline(
    model: &ScaleModel,
    scenes: &[TrainingScene],
    upto_scale: usize,
) -> Result<MetricsRow> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    let mut time = 0.0;
    for scene in scenes {
        let truth = scene.cloud.labels().ok_or(Error::MissingLabels)?;
        let out = run_baseline(model, &scene.cloud, &scene.parts, upto_scale)?;
        let gt: Vec<u16> = out.indices.iter().map(|&k| truth[k]).collect();
        cm.add_labels(&gt, &out.prediction.labels);
        time += out.wall.as_nanos() as f64 / 1e6;
    }
    let m = compute_metrics(&cm)?;
    Ok(MetricsRow {
        scale: upto_scale,
        method: "Baseline".into(),
        oacc: m.oacc,
        macc: m.macc,
        miou: m.miou,
        time_ms: time / scenes.len().max(1) as f64,
    })
}

pub fn rows_to_jsonl(rows: &[MetricsRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
        .collect()
}

/// Table with columns Scale, Method, oAcc, mAcc, mIoU, Time (percentages, ms).
pub fn rows_to_table(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6}{:<16}{:>7}{:>7}{:>7}{:>11}",
        "Scale", "Method", "oAcc", "mAcc", "mIoU", "Time (ms)"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6}{:<16}{:>7.1}{:>7.1}{:>7.1}{:>11.1}",
            r.scale,
            r.method,
            100.0 * r.oacc,
            100.0 * r.macc,
            100.0 * r.miou,
            r.time_ms
        );
    }
    out
}
