//! Temporal grounding scores: interval IoU, tolerance-extended pre-crash IoU
//! and the AP@τ / mIoU aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::schema::TemporalAnnotation;

pub const DEFAULT_AP_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Intersection over union of two closed intervals.
///
/// A zero-length truth only matches the identical zero-length prediction.
pub fn interval_iou(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let (p1, p2) = (pred.0.min(pred.1), pred.0.max(pred.1));
    let (t1, t2) = (truth.0.min(truth.1), truth.0.max(truth.1));
    let inter = (p2.min(t2) - p1.max(t1)).max(0.0);
    let union = p2.max(t2) - p1.min(t1);
    if union <= 0.0 {
        // Both intervals are the same point.
        return 1.0;
    }
    if t2 - t1 == 0.0 || p2 - p1 == 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Pre-crash onset score with an explicit tolerance `delta >= 0`.
///
/// Full credit on `[t_ar - delta, t_ar]`, a linear ramp down to zero across
/// `(t_ar, t_ai)`, and zero everywhere else.
pub fn precrash_iou_with(t_hat: f64, t_ar: f64, t_ai: f64, delta: f64) -> f64 {
    if t_hat >= t_ar - delta && t_hat <= t_ar {
        1.0
    } else if t_hat > t_ar && t_hat < t_ai {
        (t_hat - t_ai) / (t_ar - t_ai)
    } else {
        0.0
    }
}

/// [`precrash_iou_with`] using the annotation's own tolerance.
pub fn precrash_iou(t_hat: f64, ann: &TemporalAnnotation) -> f64 {
    precrash_iou_with(t_hat, ann.pre_crash_start(), ann.crash_start(), ann.tolerance())
}

/// Fraction of videos whose IoU is at least `tau`.
pub fn average_precision_at(ious: &[f64], tau: f64) -> Result<f64, MetricsError> {
    if ious.is_empty() {
        return Err(MetricsError::EmptySet("average precision"));
    }
    Ok(ious.iter().filter(|&&x| x >= tau).count() as f64 / ious.len() as f64)
}

/// `AP@30` for τ = 0.3.
pub fn ap_label(tau: f64) -> String {
    format!("AP@{}", (tau * 100.0).round() as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TemporalScore {
    pub per_video: BTreeMap<String, f64>,
    pub miou: f64,
    /// Keyed by [`ap_label`].
    pub ap: BTreeMap<String, f64>,
}

impl TemporalScore {
    pub fn from_per_video(per_video: BTreeMap<String, f64>, thresholds: &[f64]) -> Result<Self, MetricsError> {
        let ious: Vec<f64> = per_video.values().copied().collect();
        if ious.is_empty() {
            return Err(MetricsError::EmptySet("temporal score"));
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let mut ap = BTreeMap::new();
        for &tau in thresholds {
            ap.insert(ap_label(tau), average_precision_at(&ious, tau)?);
        }
        Ok(Self { per_video, miou, ap })
    }
}
