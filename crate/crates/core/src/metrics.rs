//! Multi-label evaluation: per-class AP, mAP, macro/micro F1 at a tuned
//! threshold and top-k F1.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clsnet::predict_labels;
use crate::error::{bail, Result};

/// Scores and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PredictionRecord {
    pub fn from_label_set(image_id: impl Into<String>, scores: Vec<f64>, labels: &[usize]) -> Self {
        let mut y = vec![0u8; scores.len()];
        for &l in labels {
            y[l] = 1;
        }
        PredictionRecord { image_id: image_id.into(), scores, labels: y }
    }
}

/// Non-interpolated AP: the mean precision at the rank of each positive,
/// ranking by descending score with ties kept in input order. `None` when
/// there is no positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn num_classes(records: &[PredictionRecord]) -> usize {
    records.first().map_or(0, |r| r.scores.len())
}

pub fn per_class_ap(records: &[PredictionRecord]) -> Vec<Option<f64>> {
    (0..num_classes(records))
        .map(|k| {
            let scores: Vec<f64> = records.iter().map(|r| r.scores[k]).collect();
            let labels: Vec<u8> = records.iter().map(|r| r.labels[k]).collect();
            average_precision(&scores, &labels)
        })
        .collect()
}

/// Mean over the classes that have an AP.
pub fn mean_ap(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let missing = per_class.len() - present.len();
    if missing > 0 {
        log::warn!("{missing} class(es) without positives left out of mAP");
    }
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Macro and micro F1 of binary predictions against the records' labels.
fn f1_of(records: &[PredictionRecord], predictions: &[Vec<u8>]) -> (f64, f64) {
    let k = num_classes(records);
    if k == 0 {
        return (0.0, 0.0);
    }
    let mut counts = vec![(0usize, 0usize, 0usize); k];
    for (r, pred) in records.iter().zip(predictions) {
        for c in 0..k {
            match (pred[c] != 0, r.labels[c] != 0) {
                (true, true) => counts[c].0 += 1,
                (true, false) => counts[c].1 += 1,
                (false, true) => counts[c].2 += 1,
                (false, false) => {}
            }
        }
    }
    let f1_c = counts.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).sum::<f64>() / k as f64;
    let (tp, fp, fn_) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    (f1_c, f1(tp, fp, fn_))
}

/// `(F1-C, F1-O)` of predictions thresholded at `tau`.
pub fn f1_scores(records: &[PredictionRecord], tau: f64) -> (f64, f64) {
    let preds: Vec<Vec<u8>> = records.iter().map(|r| predict_labels(&r.scores, tau)).collect();
    f1_of(records, &preds)
}

/// The candidate thresholds `0.05, 0.10, ..., 0.95`.
pub fn threshold_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Grid threshold with the best F1-O; the smallest wins ties.
pub fn tune_threshold(records: &[PredictionRecord]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.05);
    for tau in threshold_grid() {
        let (_, f1_o) = f1_scores(records, tau);
        if f1_o > best.0 {
            best = (f1_o, tau);
        }
    }
    best.1
}

/// F1 when each image predicts exactly its `k` highest-scoring classes
/// (lower class index first on ties).
pub fn topk_f1(records: &[PredictionRecord], k: usize) -> Result<(f64, f64)> {
    let classes = num_classes(records);
    if k == 0 || k > classes {
        bail!(Contract, "top-k with k = {k} over {classes} classes");
    }
    let preds: Vec<Vec<u8>> = records
        .iter()
        .map(|r| {
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| r.scores[b].total_cmp(&r.scores[a]));
            let mut pred = vec![0u8; classes];
            for &c in &order[..k] {
                pred[c] = 1;
            }
            pred
        })
        .collect();
    Ok(f1_of(records, &preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `null` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub f1_c: f64,
    pub f1_o: f64,
    pub topk: usize,
    pub topk_f1_c: f64,
    pub topk_f1_o: f64,
    pub tuned_tau: f64,
}

/// Evaluate `test` with the threshold tuned on `val`.
pub fn evaluate(test: &[PredictionRecord], val: &[PredictionRecord], topk: usize) -> Result<MetricsReport> {
    if test.is_empty() || val.is_empty() {
        bail!(Input, "evaluation needs non-empty test and validation records");
    }
    let k = num_classes(test);
    for r in test.iter().chain(val) {
        if r.scores.len() != k || r.labels.len() != k {
            bail!(Input, "{}: expected {k} scores and labels", r.image_id);
        }
        if r.scores.iter().any(|s| !s.is_finite()) {
            bail!(Numeric, "{}: non-finite score", r.image_id);
        }
        if r.labels.iter().any(|&l| l > 1) {
            bail!(Input, "{}: labels must be 0 or 1", r.image_id);
        }
    }
    let per_class_ap = per_class_ap(test);
    let tau = tune_threshold(val);
    let (f1_c, f1_o) = f1_scores(test, tau);
    let topk = topk.min(k);
    let (topk_f1_c, topk_f1_o) = topk_f1(test, topk)?;
    Ok(MetricsReport {
        map: mean_ap(&per_class_ap),
        per_class_ap,
        f1_c,
        f1_o,
        topk,
        topk_f1_c,
        topk_f1_o,
        tuned_tau: tau,
    })
}

/// Two-column CSV `class_name,ap`; classes without positives get an empty field.
pub fn write_ap_csv(report: &MetricsReport, class_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    if class_names.len() != report.per_class_ap.len() {
        bail!(Contract, "{} class names for {} classes", class_names.len(), report.per_class_ap.len());
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "class_name,ap")?;
    for (name, ap) in class_names.iter().zip(&report.per_class_ap) {
        match ap {
            Some(v) => writeln!(out, "{name},{v}")?,
            None => writeln!(out, "{name},")?,
        }
    }
    out.flush()?;
    Ok(())
}
