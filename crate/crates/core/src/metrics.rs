//! Binary classification metrics with real (label 1) as the positive class.
//!
//! A score at or above the threshold predicts positive. ROC points are taken
//! once per distinct score, so tied scores collapse into a single step and the
//! trapezoidal AUC equals the pairwise rank statistic with half credit for ties.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(bad));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score #{i}")));
    }
    Ok(())
}

pub fn confusion_counts(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    f1_from(precision(c), recall(c))
}

/// Names of metrics whose denominator was zero for these counts.
pub fn degenerate_metrics(c: &ConfusionCounts) -> Vec<String> {
    let mut flags = Vec::new();
    if c.tp + c.fp == 0 {
        flags.push("precision".to_string());
    }
    if c.tp + c.fn_ == 0 {
        flags.push("recall".to_string());
    }
    if precision(c) + recall(c) == 0.0 {
        flags.push("f1".to_string());
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Threshold reaching each point; the first is `+∞`.
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# fakescope-roc v1\nfpr,tpr,threshold\n");
        for (&(fpr, tpr), &t) in self.points.iter().zip(&self.thresholds) {
            let _ = writeln!(out, "{fpr},{tpr},{t}");
        }
        out
    }
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let negatives = labels.len() as f64 - positives;
    if positives == 0.0 || negatives == 0.0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
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
        points.push((fp as f64 / negatives, tp as f64 / positives));
        thresholds.push(s);
    }
    Ok(RocCurve { points, thresholds })
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.area())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    pub n: u64,
    /// Metrics reported as 0 because their denominator was 0.
    #[serde(default)]
    pub degenerate: Vec<String>,
}

/// All metrics at `threshold`. Scores are probabilities of the real class.
pub fn metrics_report(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    let counts = confusion_counts(scores, labels, threshold)?;
    let auc = auc(scores, labels)?;
    Ok(MetricsReport {
        auc,
        accuracy: accuracy(&counts),
        f1: f1(&counts),
        precision: precision(&counts),
        recall: recall(&counts),
        counts,
        threshold,
        n: counts.total(),
        degenerate: degenerate_metrics(&counts),
    })
}
