//! Evaluation metrics: MAE, binary classification scores, Dice, PSNR.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KmtrError, Result};
use crate::phantom::SegmentationMap;

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mean_abs_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(KmtrError::shape("mean_abs_error", &[truth.len()], &[pred.len()]));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Area under the ROC curve via the rank-sum statistic with average ranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l).map(|(_, r)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Average precision: Σ_k (R_k − R_{k−1}) P_k over distinct score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(Some(ap))
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(KmtrError::shape("binary_metrics", &[labels.len()], &[scores.len()]));
    }
    Ok(())
}

/// Threshold-free AUC/AP plus F1, recall and precision at `threshold`
/// (predicted positive when score >= threshold). Empty ratios count as 0.
pub fn binary_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<BinaryMetrics> {
    let auc = auc_roc(scores, labels)?;
    let ap = average_precision(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(BinaryMetrics { auc, ap, f1, recall, precision })
}

/// 2|P∩G| / (|P|+|G|) for class `c`; 1.0 when the class is absent from both.
pub fn dice(pred: &SegmentationMap, truth: &SegmentationMap, c: u8) -> Result<f64> {
    if pred.shape != truth.shape || pred.labels.len() != truth.labels.len() {
        return Err(KmtrError::shape("dice", &truth.shape, &pred.shape));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        let (a, b) = (p == c, t == c);
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mean Dice over foreground classes 1..=3.
pub fn foreground_dice(pred: &SegmentationMap, truth: &SegmentationMap) -> Result<f64> {
    let mut s = 0.0;
    for c in 1..=3 {
        s += dice(pred, truth, c)?;
    }
    Ok(s / 3.0)
}

/// 10·log10(max(truth)² / MSE), capped at 100 dB.
pub fn psnr(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(KmtrError::shape("psnr", &[truth.len()], &[pred.len()]));
    }
    let peak = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Named metric values per task, with run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub n_subjects: usize,
    pub r: f64,
    pub seed: u64,
    /// Free-form labels, e.g. the encoder variant.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    /// Metrics that are undefined for this split (e.g. AUC with one class).
    #[serde(default)]
    pub undefined: Vec<String>,
}

impl MetricReport {
    pub fn new(split: &str, n_subjects: usize, r: f64, seed: u64) -> Self {
        Self { split: split.into(), n_subjects, r, seed, tags: BTreeMap::new(), metrics: BTreeMap::new(), undefined: vec![] }
    }

    pub fn insert(&mut self, task: &str, name: &str, value: f64) {
        self.metrics.entry(task.to_string()).or_default().insert(name.to_string(), value);
    }

    /// Records `value`, or marks `task/name` undefined when absent.
    pub fn insert_opt(&mut self, task: &str, name: &str, value: Option<f64>) {
        match value {
            Some(v) => self.insert(task, name, v),
            None => self.undefined.push(format!("{task}/{name}")),
        }
    }

    pub fn get(&self, task: &str, name: &str) -> Option<f64> {
        self.metrics.get(task).and_then(|m| m.get(name)).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(KmtrError::InvalidConfig("metric report over zero subjects".into()));
        }
        for (task, m) in &self.metrics {
            for (k, v) in m {
                if !v.is_finite() {
                    return Err(KmtrError::NonFinite(format!("{task}/{k}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<stem>.json` and `<stem>.csv` (task,metric,value rows).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.validate()?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        w.write_record(["task", "metric", "value"])?;
        for (task, m) in &self.metrics {
            for (k, v) in m {
                w.write_record([task.as_str(), k.as_str(), &format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
