//! Segmentation metrics, overlays and comparative reports.
//!
//! Conventions for empty denominators are fixed so every metric is total:
//! Dice is 1 when both masks are empty; sensitivity and precision are 1 when
//! `tp = fp = fn = 0` and 0 otherwise; MCC is 0 when any marginal is 0.
//! PR-AUC is the step-wise average precision `sum (R_k - R_{k-1}) P_k` over
//! distinct score thresholds, which avoids the optimistic bias of
//! trapezoids in PR space.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::domain::{threshold, Mask, ProbMap};
use crate::error::{Error, IoContext, Result};
use crate::flow::{wbce_loss, LossWeights};
use crate::infer::{segment_batch, InferenceConfig, Segmentation};
use crate::io;
use crate::model::{ModelConfig, WeightSet};
use crate::train::ModelKind;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(y: &Mask, yhat: &Mask) -> Result<ConfusionCounts> {
    y.grid().ensure_same_shape(yhat.grid())?;
    let mut c = ConfusionCounts::default();
    for (&t, &p) in y.as_slice().iter().zip(yhat.as_slice()) {
        match (t, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

fn ratio_or_degenerate(tp: u64, other: u64, c: &ConfusionCounts) -> f64 {
    if tp + other > 0 {
        tp as f64 / (tp + other) as f64
    } else if c.tp == 0 && c.fp == 0 && c.fn_ == 0 {
        1.0
    } else {
        0.0
    }
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio_or_degenerate(c.tp, c.fn_, c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio_or_degenerate(c.tp, c.fp, c)
}

/// Matthews correlation with 128-bit intermediates.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as u128, c.fp as u128, c.fn_ as u128, c.tn as u128);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    let num = (tp * tn) as i128 - (fp * fn_) as i128;
    // Each factor is at most the pixel count, so the product fits in 128
    // bits for any image below 2^32 pixels.
    let den = factors.iter().fold(1u128, |a, &f| a.saturating_mul(f));
    num as f64 / (den as f64).sqrt()
}

/// Step-wise average precision of `scores` ranked against `labels`.
fn average_precision(labels: &[u8], scores: &[f32]) -> Result<f64> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedPrAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let prec = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * prec;
        prev_recall = recall;
    }
    Ok(area)
}

pub fn pr_auc(y: &Mask, p: &ProbMap) -> Result<f64> {
    y.grid().ensure_same_shape(p.grid())?;
    average_precision(y.as_slice(), p.as_slice())
}

pub const TP_COLOR: [u8; 3] = [255, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlay {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Overlay {
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_rgb(path, self.height, self.width, &self.pixels)
    }
}

/// TP yellow, FP red, FN green, TN black.
pub fn overlay(y: &Mask, yhat: &Mask) -> Result<Overlay> {
    y.grid().ensure_same_shape(yhat.grid())?;
    let (height, width) = y.shape();
    let pixels = y
        .as_slice()
        .iter()
        .zip(yhat.as_slice())
        .map(|(&t, &p)| match (t, p) {
            (1, 1) => TP_COLOR,
            (0, 1) => FP_COLOR,
            (1, 0) => FN_COLOR,
            _ => TN_COLOR,
        })
        .collect();
    Ok(Overlay { height, width, pixels })
}

/// Metrics in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub dice: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub mcc: f64,
    /// `None` when the ground truth has no foreground.
    pub pr_auc: Option<f64>,
}

pub const COLUMNS: [&str; 6] = ["Loss", "Dice", "Sens.", "Prec.", "MCC", "PR-AUC"];

impl Metrics {
    fn from_counts(c: &ConfusionCounts, loss: f64, pr_auc: Option<f64>) -> Self {
        Self {
            loss,
            dice: dice(c),
            sensitivity: sensitivity(c),
            precision: precision(c),
            mcc: mcc(c),
            pr_auc,
        }
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            Some(self.loss),
            Some(self.dice),
            Some(self.sensitivity),
            Some(self.precision),
            Some(self.mcc),
            self.pr_auc,
        ]
    }
}

/// Scores one prediction against its ground truth.
pub fn image_metrics(y: &Mask, prob: &ProbMap, tau: f64, weights: LossWeights) -> Result<Metrics> {
    let yhat = threshold(prob, tau)?;
    let c = confusion(y, &yhat)?;
    let loss = wbce_loss(y, prob, weights)?;
    let auc = match pr_auc(y, prob) {
        Ok(v) => Some(v),
        Err(Error::UndefinedPrAuc) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics::from_counts(&c, loss, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub rows: Vec<ImageRow>,
    /// Images that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
    /// Unweighted mean over scored images.
    pub mean: Metrics,
    /// Metrics over all pixels of all scored images pooled together.
    pub pooled: Option<Metrics>,
}

fn mean_metrics(rows: &[ImageRow]) -> Metrics {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.metrics.pr_auc).collect();
    Metrics {
        loss: avg(|m| m.loss),
        dice: avg(|m| m.dice),
        sensitivity: avg(|m| m.sensitivity),
        precision: avg(|m| m.precision),
        mcc: avg(|m| m.mcc),
        pr_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    }
}

/// One prediction to score.
pub struct Prediction<'a> {
    pub name: &'a str,
    pub truth: &'a Mask,
    pub prob: &'a ProbMap,
}

/// Builds a report from probability maps. Per-image errors are recorded
/// and excluded from the aggregates.
pub fn evaluate_predictions(
    model: &str,
    predictions: &[Prediction<'_>],
    tau: f64,
    weights: LossWeights,
    pooled: bool,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let scored: Vec<Result<Metrics>> = predictions
        .par_iter()
        .map(|p| image_metrics(p.truth, p.prob, tau, weights))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (p, r) in predictions.iter().zip(scored) {
        match r {
            Ok(metrics) => {
                rows.push(ImageRow {
                    name: p.name.to_string(),
                    metrics,
                });
                ok.push(p);
            }
            Err(e) => failures.push((p.name.to_string(), e.to_string())),
        }
    }
    let pooled = if pooled && !ok.is_empty() {
        let mut c = ConfusionCounts::default();
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        let mut loss_sum = 0.0;
        for p in &ok {
            c.add(&confusion(p.truth, &threshold(p.prob, tau)?)?);
            labels.extend_from_slice(p.truth.as_slice());
            scores.extend_from_slice(p.prob.as_slice());
            loss_sum += wbce_loss(p.truth, p.prob, weights)? * p.truth.as_slice().len() as f64;
        }
        let auc = average_precision(&labels, &scores).ok();
        Some(Metrics::from_counts(&c, loss_sum / labels.len() as f64, auc))
    } else {
        None
    };
    Ok(MetricsReport {
        model: model.to_string(),
        mean: mean_metrics(&rows),
        rows,
        failures,
        pooled,
    })
}

/// Runs inference over `test_set` (seed `cfg.seed + index`) and scores it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    label: &str,
    kind: ModelKind,
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    test_set: &[SamplePair],
    cfg: &InferenceConfig,
    loss_weights: LossWeights,
    pooled: bool,
) -> Result<(MetricsReport, Vec<Result<Segmentation>>)> {
    if test_set.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    let images: Vec<_> = test_set.iter().map(|s| s.image.clone()).collect();
    let segs = segment_batch(kind, config, weights, &images, cfg, cfg.seed);
    let mut preds = Vec::new();
    let mut failed = Vec::new();
    for (s, seg) in test_set.iter().zip(&segs) {
        match seg {
            Ok(seg) => preds.push(Prediction {
                name: &s.name,
                truth: &s.mask,
                prob: &seg.prob,
            }),
            Err(e) => failed.push((s.name.clone(), e.to_string())),
        }
    }
    let mut report = if preds.is_empty() {
        MetricsReport {
            model: label.to_string(),
            rows: Vec::new(),
            failures: Vec::new(),
            mean: mean_metrics(&[]),
            pooled: None,
        }
    } else {
        evaluate_predictions(label, &preds, cfg.tau, loss_weights, pooled)?
    };
    report.failures.extend(failed);
    Ok((report, segs))
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    /// One row per image plus `mean` (and `pooled`) summary rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
        w.write_record(["name", "loss", "dice", "sensitivity", "precision", "mcc", "pr_auc"])
            .map_err(csv_err)?;
        let mut emit = |name: &str, m: &Metrics| -> Result<()> {
            let mut rec = vec![name.to_string()];
            rec.extend(m.values().iter().map(|v| fmt_value(*v)));
            w.write_record(&rec).map_err(csv_err)
        };
        for r in &self.rows {
            emit(&r.name, &r.metrics)?;
        }
        emit("mean", &self.mean)?;
        if let Some(p) = &self.pooled {
            emit("pooled", p)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_path("creating", parent)?;
        }
        std::fs::write(path, self.to_csv()?).with_path("writing", path)
    }
}

/// Aligned comparative table, one row per model.
pub fn format_table(rows: &[(String, Metrics)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Model".len());
    let col_w = 8;
    let mut out = format!("{:<name_w$}", "Model");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>col_w$}");
    }
    out.push('\n');
    for (name, m) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for v in m.values() {
            let cell = v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            let _ = write!(out, "  {cell:>col_w$}");
        }
        out.push('\n');
    }
    out
}

/// Dice of predicting every pixel as foreground, averaged over images.
pub fn all_foreground_dice(set: &[SamplePair]) -> f64 {
    let total: f64 = set
        .iter()
        .map(|s| {
            let (h, w) = s.shape();
            dice(&confusion(&s.mask, &Mask::ones(h, w)).expect("same shape"))
        })
        .sum();
    total / set.len().max(1) as f64
}
