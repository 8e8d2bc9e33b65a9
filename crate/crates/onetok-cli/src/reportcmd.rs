//! Dataset-level quality reports: classification metrics at the metric's
//! threshold, and ROC/AUC over confidence scores.

use thiserror::Error;

use onetok_core::classmap::ClassKind;
use onetok_core::report::{
    binary_metrics, multiclass_metrics, roc_report, ClassifyMetrics, Confusion, MulticlassReport,
    ReportError, RocReport,
};
use onetok_core::trainer::{LabelValue, TrainingExample};

use crate::runner::{MetricRunner, RunnerError};

#[derive(Debug, Error)]
pub enum ReportCmdError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {index}: label {label:?} is not one of the metric's classes")]
    BadLabel { index: usize, label: String },
    #[error("example {index}: multilabel datasets are not supported by this report")]
    MultilabelUnsupported { index: usize },
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// One scored example: predicted label, truth label, confidence of the
/// positive (first-listed) class.
#[derive(Debug, Clone)]
pub struct ScoredExample {
    pub predicted: String,
    pub truth: String,
    pub positive_confidence: f64,
}

/// Run the metric over every example. Binary predictions apply the decision
/// threshold to the positive class; multiclass keeps the argmax label.
pub fn score_dataset(
    runner: &mut MetricRunner,
    dataset: &[TrainingExample],
) -> Result<Vec<ScoredExample>, ReportCmdError> {
    if dataset.is_empty() {
        return Err(ReportCmdError::EmptyDataset);
    }
    let threshold = runner.threshold();
    let mut out = Vec::with_capacity(dataset.len());
    for (index, example) in dataset.iter().enumerate() {
        let truth = match &example.label {
            LabelValue::Single(label) => label.clone(),
            LabelValue::Set(_) => return Err(ReportCmdError::MultilabelUnsupported { index }),
        };
        let result = runner.evaluate(&example.vars)?;
        let positive_class = result.distribution[0].class.clone();
        let positive_confidence = result.distribution[0].p;
        let predicted = if result.distribution.len() == 2 {
            if positive_confidence >= threshold {
                positive_class
            } else {
                result.distribution[1].class.clone()
            }
        } else {
            result.label.clone()
        };
        out.push(ScoredExample {
            predicted,
            truth,
            positive_confidence,
        });
    }
    Ok(out)
}

/// Classification report: binary or macro-averaged multiclass.
#[derive(Debug, Clone)]
pub enum ClassifyReport {
    Binary {
        metrics: ClassifyMetrics,
        confusion: Confusion,
        positive_class: String,
    },
    Multiclass(MulticlassReport),
}

impl ClassifyReport {
    pub fn summary_text(&self) -> String {
        match self {
            ClassifyReport::Binary {
                metrics,
                confusion,
                positive_class,
            } => format!(
                "positive class: {positive_class}\n\
                 accuracy  {:.4}\nprecision {:.4}\nrecall    {:.4}\nf1        {:.4}\n\
                 confusion: tp {} fp {} fn {} tn {}\n",
                metrics.accuracy,
                metrics.precision,
                metrics.recall,
                metrics.f1,
                confusion.tp,
                confusion.fp,
                confusion.fn_,
                confusion.tn
            ),
            ClassifyReport::Multiclass(report) => {
                let mut out = format!(
                    "accuracy {:.4}  macro-precision {:.4}  macro-recall {:.4}  macro-f1 {:.4}\n",
                    report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
                );
                for (label, m) in &report.per_class {
                    out.push_str(&format!(
                        "  {label}: precision {:.4} recall {:.4} f1 {:.4}\n",
                        m.precision, m.recall, m.f1
                    ));
                }
                out
            }
        }
    }

    pub fn csv(&self) -> String {
        match self {
            ClassifyReport::Binary {
                metrics, confusion, ..
            } => format!(
                "accuracy,precision,recall,f1,tp,fp,fn,tn\n{},{},{},{},{},{},{},{}\n",
                metrics.accuracy,
                metrics.precision,
                metrics.recall,
                metrics.f1,
                confusion.tp,
                confusion.fp,
                confusion.fn_,
                confusion.tn
            ),
            ClassifyReport::Multiclass(report) => {
                let mut out = String::from("class,precision,recall,f1\n");
                for (label, m) in &report.per_class {
                    out.push_str(&format!("{label},{},{},{}\n", m.precision, m.recall, m.f1));
                }
                out.push_str(&format!(
                    "macro,{},{},{}\n",
                    report.macro_precision, report.macro_recall, report.macro_f1
                ));
                out
            }
        }
    }

    pub fn f1(&self) -> f64 {
        match self {
            ClassifyReport::Binary { metrics, .. } => metrics.f1,
            ClassifyReport::Multiclass(report) => report.macro_f1,
        }
    }
}

/// Build the classification report from scored examples. The class list
/// comes from the metric spec (first class = positive for binary).
pub fn classify_report(
    scored: &[ScoredExample],
    classes: &[String],
    kind: ClassKind,
) -> Result<ClassifyReport, ReportCmdError> {
    if scored.is_empty() {
        return Err(ReportCmdError::EmptyDataset);
    }
    for (index, s) in scored.iter().enumerate() {
        if !classes.contains(&s.truth) {
            return Err(ReportCmdError::BadLabel {
                index,
                label: s.truth.clone(),
            });
        }
    }
    match kind {
        ClassKind::Binary => {
            let positive = &classes[0];
            let pairs: Vec<(bool, bool)> = scored
                .iter()
                .map(|s| (&s.predicted == positive, &s.truth == positive))
                .collect();
            let (metrics, confusion) = binary_metrics(&pairs);
            Ok(ClassifyReport::Binary {
                metrics,
                confusion,
                positive_class: positive.clone(),
            })
        }
        _ => {
            let index_of = |label: &str| classes.iter().position(|c| c == label).unwrap_or(0);
            let pairs: Vec<(usize, usize)> = scored
                .iter()
                .map(|s| (index_of(&s.predicted), index_of(&s.truth)))
                .collect();
            Ok(ClassifyReport::Multiclass(multiclass_metrics(
                &pairs, classes,
            )))
        }
    }
}

/// ROC over the positive-class confidences of a binary metric.
pub fn roc_from_scored(
    scored: &[ScoredExample],
    positive_class: &str,
) -> Result<RocReport, ReportCmdError> {
    let pairs: Vec<(f64, bool)> = scored
        .iter()
        .map(|s| (s.positive_confidence, s.truth == positive_class))
        .collect();
    Ok(roc_report(&pairs)?)
}

/// Per-example CSV of predictions and confidences.
pub fn scored_csv(scored: &[ScoredExample]) -> String {
    let mut out = String::from("index,truth,predicted,positive_confidence\n");
    for (i, s) in scored.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            s.truth, s.predicted, s.positive_confidence
        ));
    }
    out
}
