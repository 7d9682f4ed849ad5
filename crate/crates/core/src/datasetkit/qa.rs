//! QA templating: six pairs per positive video, four per negative.

use std::collections::BTreeMap;

use super::{DatasetError, ReferenceTexts};
use crate::schema::{QaPair, TaskId, VideoSample};
use crate::templates;

/// Builds the QA pairs of every video, in input order and task order.
///
/// Negatives get recognition plus the three understanding tasks with fixed
/// crash-free answers; localization is only asked of positives.
pub fn build_qa_pairs(
    samples: &[VideoSample],
    texts: &BTreeMap<String, ReferenceTexts>,
) -> Result<Vec<QaPair>, DatasetError> {
    let mut out = Vec::with_capacity(samples.len() * 6);
    for s in samples {
        let id = s.video_id();
        let tasks: &[TaskId] = if s.label() { &TaskId::ALL } else { &TaskId::ALL[..4] };
        for &task in tasks {
            let answer = match (task, s.annotation()) {
                (TaskId::Recognition, _) => templates::recognition_answer(s.label()).to_string(),
                (TaskId::CrashLocalization, Some(a)) => {
                    templates::crash_interval_answer(a.crash_start(), a.crash_end())
                }
                (TaskId::PreCrashLocalization, Some(a)) => templates::precrash_answer(a.pre_crash_start()),
                (_, None) => templates::negative_answer(task).expect("understanding task").to_string(),
                (_, Some(_)) => texts
                    .get(id)
                    .and_then(|t| t.get(task))
                    .ok_or_else(|| DatasetError::MissingText { video_id: id.to_string(), task })?
                    .to_string(),
            };
            out.push(QaPair {
                video_id: id.to_string(),
                task,
                question: templates::question(task).to_string(),
                reference_answer: answer,
            });
        }
    }
    Ok(out)
}
