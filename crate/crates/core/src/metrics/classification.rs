//! Class-level recall, precision and F1 for crash recognition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::schema::{Parsed, PredictionRecord, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClassMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub support: usize,
    /// Recall had no true members to divide by and was set to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub recall_undefined: bool,
    /// Nothing was predicted as this class; precision set to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
}

impl ClassMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let f1 = if recall + precision > 0.0 { 2.0 * recall * precision / (recall + precision) } else { 0.0 };
        Self { recall, precision, f1, support: tp + fn_, recall_undefined, precision_undefined }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClassificationReport {
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    /// Labeled videos without a recognition prediction, scored as negative.
    pub missing: usize,
    /// Predictions that did not parse as yes/no, scored as negative.
    pub unparsed: usize,
}

/// Scores recognition predictions against labels keyed by video id.
pub fn classification_metrics(preds: &[PredictionRecord], labels: &BTreeMap<String, bool>) -> ClassificationReport {
    let by_id: BTreeMap<&str, &PredictionRecord> =
        preds.iter().filter(|p| p.task == TaskId::Recognition).map(|p| (p.video_id.as_str(), p)).collect();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let (mut missing, mut unparsed) = (0, 0);
    for (id, &label) in labels {
        let predicted = match by_id.get(id.as_str()).map(|p| &p.parsed) {
            Some(Parsed::Boolean { value }) => *value,
            Some(_) => {
                unparsed += 1;
                false
            }
            None => {
                missing += 1;
                false
            }
        };
        match (label, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    ClassificationReport {
        positive: ClassMetrics::from_counts(tp, fp, fn_),
        negative: ClassMetrics::from_counts(tn, fn_, fp),
        missing,
        unparsed,
    }
}
