//! Evaluation: recognition Rec/Pre/F1, text overlap for the understanding
//! tasks, and mIoU with AP@τ for the two localization tasks.

mod classification;
mod temporal;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Parsed, PredictionRecord, QaPair, TaskId, VideoSample};

pub use classification::{classification_metrics, ClassMetrics, ClassificationReport};
pub use temporal::{
    ap_label, average_precision_at, interval_iou, precrash_iou, precrash_iou_with, TemporalScore, DEFAULT_AP_THRESHOLDS,
};
pub use text::{bleu, bleu_tokens, lcs_len, rouge_l, rouge_l_from_lcs, rouge_l_tokens, EmbeddingScorer, BLEU_EPSILON};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0}: nothing to score")]
    EmptySet(&'static str),
    #[error("duplicate prediction for video `{video_id}` task {task}")]
    Duplicate { video_id: String, task: TaskId },
    #[error("invalid eval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EvalConfig {
    /// Overrides every annotation's pre-crash tolerance when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub ap_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { delta: None, ap_thresholds: DEFAULT_AP_THRESHOLDS.to_vec() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if let Some(d) = self.delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(MetricsError::Config(format!("delta must be >= 0, got {d}")));
            }
        }
        if self.ap_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(MetricsError::Config("AP thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scores for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskReport {
    pub evaluated: bool,
    pub num_videos: usize,
    /// Named as in the usual crash-analysis results table: Rec, Pre, F1,
    /// BLEU, ROUGE, BERT, mIoU and AP@τ.
    pub metrics: BTreeMap<String, f64>,
    /// Videos with no prediction for this task, scored as wrong.
    pub missing: usize,
    /// Predictions whose answer could not be parsed, scored as wrong.
    pub unparsed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<ClassificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_video: Option<BTreeMap<String, f64>>,
}

impl TaskReport {
    fn not_evaluated() -> Self {
        Self {
            evaluated: false,
            num_videos: 0,
            metrics: BTreeMap::new(),
            missing: 0,
            unparsed: 0,
            classes: None,
            per_video: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub tasks: BTreeMap<TaskId, TaskReport>,
}

/// Display order of the metrics of one task.
pub fn metric_names(task: TaskId, ap_thresholds: &[f64]) -> Vec<String> {
    match task {
        TaskId::Recognition => vec!["Rec".into(), "Pre".into(), "F1".into()],
        TaskId::Description | TaskId::CausalReasoning | TaskId::PreventionReasoning => {
            vec!["BLEU".into(), "ROUGE".into(), "BERT".into()]
        }
        TaskId::CrashLocalization | TaskId::PreCrashLocalization => {
            let mut v = vec!["mIoU".to_string()];
            v.extend(ap_thresholds.iter().map(|t| ap_label(*t)));
            v
        }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report") + "\n"
    }

    pub fn metric(&self, task: TaskId, name: &str) -> Option<f64> {
        self.tasks.get(&task).and_then(|t| t.metrics.get(name)).copied()
    }

    /// Task / metric / value table with aligned columns.
    pub fn to_table(&self) -> String {
        let mut rows = vec![("Task".to_string(), "Metric".to_string(), "Value".to_string())];
        let thresholds = self.ap_thresholds();
        for task in TaskId::ALL {
            let Some(r) = self.tasks.get(&task) else { continue };
            if !r.evaluated {
                rows.push((task.name().into(), "-".into(), "not evaluated".into()));
                continue;
            }
            for name in metric_names(task, &thresholds) {
                if let Some(v) = r.metrics.get(&name) {
                    rows.push((task.name().into(), name, format!("{v:.4}")));
                }
            }
        }
        render_rows(&rows)
    }

    fn ap_thresholds(&self) -> Vec<f64> {
        let mut set = BTreeSet::new();
        for r in self.tasks.values() {
            for k in r.metrics.keys() {
                if let Some(p) = k.strip_prefix("AP@").and_then(|p| p.parse::<i64>().ok()) {
                    set.insert(p);
                }
            }
        }
        set.into_iter().map(|p| p as f64 / 100.0).collect()
    }
}

fn render_rows(rows: &[(String, String, String)]) -> String {
    let w0 = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.chars().count()).max().unwrap_or(0);
    let mut out = String::new();
    for (a, b, c) in rows {
        let _ = writeln!(out, "{a:<w0$}  {b:<w1$}  {c:>8}");
    }
    out
}

/// Scores predictions for `samples` against their reference QA pairs.
///
/// Tasks with no prediction at all are reported as not evaluated. Within an
/// evaluated task, missing or unparseable predictions score zero, and
/// localization is averaged over every positive video.
pub fn evaluate_run(
    predictions: &[PredictionRecord],
    samples: &[VideoSample],
    references: &[QaPair],
    cfg: &EvalConfig,
    embedder: Option<&dyn EmbeddingScorer>,
) -> Result<MetricsReport, MetricsError> {
    cfg.validate()?;
    let mut preds: BTreeMap<(TaskId, &str), &PredictionRecord> = BTreeMap::new();
    for p in predictions {
        if preds.insert((p.task, p.video_id.as_str()), p).is_some() {
            return Err(MetricsError::Duplicate { video_id: p.video_id.clone(), task: p.task });
        }
    }
    let present: BTreeSet<TaskId> = preds.keys().map(|k| k.0).collect();
    let samples: BTreeMap<&str, &VideoSample> = samples.iter().map(|s| (s.video_id(), s)).collect();
    let mut tasks = BTreeMap::new();
    for task in TaskId::ALL {
        let report = if !present.contains(&task) {
            TaskReport::not_evaluated()
        } else {
            let get = |id: &str| preds.get(&(task, id)).copied();
            match task {
                TaskId::Recognition => recognition_report(predictions, &samples),
                TaskId::Description | TaskId::CausalReasoning | TaskId::PreventionReasoning => {
                    text_report(task, get, &samples, references, embedder)?
                }
                TaskId::CrashLocalization | TaskId::PreCrashLocalization => temporal_report(task, get, &samples, cfg)?,
            }
        };
        tasks.insert(task, report);
    }
    Ok(MetricsReport { config_hash: None, tasks })
}

fn recognition_report(predictions: &[PredictionRecord], samples: &BTreeMap<&str, &VideoSample>) -> TaskReport {
    let labels: BTreeMap<String, bool> = samples.iter().map(|(id, s)| (id.to_string(), s.label())).collect();
    let c = classification_metrics(predictions, &labels);
    TaskReport {
        evaluated: true,
        num_videos: labels.len(),
        metrics: [("Rec", c.positive.recall), ("Pre", c.positive.precision), ("F1", c.positive.f1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        missing: c.missing,
        unparsed: c.unparsed,
        classes: Some(c),
        per_video: None,
    }
}

fn text_report<'a>(
    task: TaskId,
    get: impl Fn(&str) -> Option<&'a PredictionRecord>,
    samples: &BTreeMap<&str, &VideoSample>,
    references: &[QaPair],
    embedder: Option<&dyn EmbeddingScorer>,
) -> Result<TaskReport, MetricsError> {
    let refs: BTreeMap<&str, &str> = references
        .iter()
        .filter(|q| q.task == task && samples.contains_key(q.video_id.as_str()))
        .map(|q| (q.video_id.as_str(), q.reference_answer.as_str()))
        .collect();
    if refs.is_empty() {
        return Err(MetricsError::EmptySet("text references"));
    }
    let (mut b, mut r, mut e) = (0.0, 0.0, 0.0);
    let mut missing = 0;
    for (id, reference) in &refs {
        let cand = match get(id) {
            Some(p) => p.raw_text.as_str(),
            None => {
                missing += 1;
                ""
            }
        };
        b += bleu(cand, reference);
        r += rouge_l(cand, reference);
        if let Some(m) = embedder {
            e += m.similarity(cand, reference).clamp(0.0, 1.0);
        }
    }
    let n = refs.len() as f64;
    let mut metrics: BTreeMap<String, f64> = [("BLEU".to_string(), b / n), ("ROUGE".to_string(), r / n)].into();
    if embedder.is_some() {
        metrics.insert("BERT".into(), e / n);
    }
    Ok(TaskReport {
        evaluated: true,
        num_videos: refs.len(),
        metrics,
        missing,
        unparsed: 0,
        classes: None,
        per_video: None,
    })
}

fn temporal_report<'a>(
    task: TaskId,
    get: impl Fn(&str) -> Option<&'a PredictionRecord>,
    samples: &BTreeMap<&str, &VideoSample>,
    cfg: &EvalConfig,
) -> Result<TaskReport, MetricsError> {
    let (mut missing, mut unparsed) = (0, 0);
    let mut per_video = BTreeMap::new();
    for (id, s) in samples {
        let Some(ann) = s.annotation() else { continue };
        let pred = get(id);
        let gated = pred.is_some_and(|p| p.flags.gated);
        let iou = match (pred.map(|p| &p.parsed), task) {
            (None, _) => {
                missing += 1;
                0.0
            }
            (Some(Parsed::Interval { start, end }), TaskId::CrashLocalization) => {
                interval_iou((*start, *end), (ann.crash_start(), ann.crash_end()))
            }
            (Some(Parsed::Point { time }), TaskId::PreCrashLocalization) => {
                let delta = cfg.delta.unwrap_or(ann.tolerance());
                precrash_iou_with(*time, ann.pre_crash_start(), ann.crash_start(), delta)
            }
            (Some(Parsed::ParseFailure { .. }), _) if !gated => {
                unparsed += 1;
                0.0
            }
            // Refusals of gated-out positives and mismatched variants.
            _ => 0.0,
        };
        per_video.insert(id.to_string(), iou);
    }
    let score = TemporalScore::from_per_video(per_video, &cfg.ap_thresholds)?;
    let mut metrics: BTreeMap<String, f64> = score.ap.clone();
    metrics.insert("mIoU".into(), score.miou);
    Ok(TaskReport {
        evaluated: true,
        num_videos: score.per_video.len(),
        metrics,
        missing,
        unparsed,
        classes: None,
        per_video: Some(score.per_video),
    })
}
