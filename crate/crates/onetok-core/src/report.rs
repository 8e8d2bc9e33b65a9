//! Classification quality reports: confusion counts, precision/recall/F1,
//! and ROC curves with trapezoidal AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("ROC needs both classes present; dataset has only one")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Binary metrics from (predicted-positive, truth-positive) pairs.
pub fn binary_metrics(pairs: &[(bool, bool)]) -> (ClassifyMetrics, Confusion) {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for &(pred, truth) in pairs {
        match (pred, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (
        ClassifyMetrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
        },
        c,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<(String, ClassifyMetrics)>,
    /// `confusion[truth][pred]`
    pub confusion: Vec<Vec<usize>>,
}

/// Macro-averaged metrics from (predicted-index, truth-index) pairs.
pub fn multiclass_metrics(pairs: &[(usize, usize)], labels: &[String]) -> MulticlassReport {
    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for &(pred, truth) in pairs {
        confusion[truth][pred] += 1;
        if pred == truth {
            correct += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c];
        let fp: usize = (0..k).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
        per_class.push((
            labels[c].clone(),
            ClassifyMetrics {
                accuracy: ratio(correct, pairs.len()),
                precision,
                recall,
                f1,
            },
        ));
    }
    MulticlassReport {
        accuracy: ratio(correct, pairs.len()),
        macro_precision: p_sum / k as f64,
        macro_recall: r_sum / k as f64,
        macro_f1: f_sum / k as f64,
        per_class,
        confusion,
    }
}

/// ROC curve points, thresholds, and trapezoidal AUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocReport {
    /// (fpr, tpr), monotone nondecreasing in both axes, from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    /// Distinct observed confidences (descending) plus the 1.0/0.0 sentinels.
    pub thresholds: Vec<f64>,
}

/// Build the ROC curve from (score, is_positive) pairs by sweeping every
/// distinct score as a threshold. Ties advance tp and fp together, which
/// makes trapezoidal AUC equal to the pairwise-comparison probability with
/// half-credit for tied scores.
pub fn roc_report(scored: &[(f64, bool)]) -> Result<RocReport, ReportError> {
    if scored.is_empty() {
        return Err(ReportError::EmptyDataset);
    }
    let n_pos = scored.iter().filter(|(_, y)| *y).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ReportError::SingleClass);
    }

    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN"));

    let mut points = vec![(0.0f64, 0.0f64)];
    let mut thresholds = vec![1.0f64];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        if score != 1.0 {
            thresholds.push(score);
        }
    }
    if *thresholds.last().unwrap() != 0.0 {
        thresholds.push(0.0);
    }
    if *points.last().unwrap() != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }

    let mut auc = 0.0f64;
    for w in points.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        auc += (x2 - x1) * (y1 + y2) / 2.0;
    }
    Ok(RocReport {
        points,
        auc,
        thresholds,
    })
}

impl RocReport {
    /// Plot-ready CSV of (fpr, tpr) points.
    pub fn points_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (fpr, tpr) in &self.points {
            out.push_str(&format!("{fpr},{tpr}\n"));
        }
        out
    }
}

/// Least-squares line fit returning (slope, intercept, r_squared).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}
