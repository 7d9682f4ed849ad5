//! Gated two-stage inference and answer parsing.
//!
//! Stage 1 runs every query through the linguistic-centric block. Understanding
//! tasks stop there. Localization queries first ask the recognition question;
//! only a "yes" sends the video through the perception-centric block, which
//! answers the localization question itself.

use serde::{Deserialize, Serialize};

use crate::model::{CrashChat, DecodingConfig, Generation, ModelError, VideoTokens};
use crate::schema::{round_tenth, ParseFlags, Parsed, PredictionRecord, TaskGroup, TaskId, VideoSample};
use crate::templates;
use crate::tokenizer::Tokenizer;

/// Decimal numbers in reading order, e.g. `[12.3, 15.0]` from the canonical interval answer.
fn numbers(text: &str) -> Vec<f64> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if !b[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
            i += 1;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        if let Ok(v) = text[start..i].parse() {
            out.push(v);
        }
    }
    out
}

fn clamp_time(t: f64, duration: f64, flags: &mut ParseFlags) -> f64 {
    let c = t.clamp(0.0, duration);
    if c != t {
        flags.clamped = true;
    }
    c
}

/// Turns generated text into the structured answer its task expects. Never fails:
/// anything unusable becomes [`Parsed::ParseFailure`] with the `unparseable` flag.
pub fn parse_answer(video_id: &str, raw_text: &str, task: TaskId, duration: f64) -> PredictionRecord {
    let mut flags = ParseFlags::default();
    let failure = |reason: &str, flags: &mut ParseFlags| {
        flags.unparseable = true;
        Parsed::ParseFailure { reason: reason.to_string() }
    };
    let parsed = match task {
        TaskId::Recognition => {
            let head = raw_text.trim_start().to_ascii_lowercase();
            let word: String = head.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
            match word.as_str() {
                "yes" => Parsed::Boolean { value: true },
                "no" => Parsed::Boolean { value: false },
                _ => failure("no leading yes/no", &mut flags),
            }
        }
        TaskId::CrashLocalization => match numbers(raw_text)[..] {
            [a, b, ..] => {
                let (mut start, mut end) = (clamp_time(a, duration, &mut flags), clamp_time(b, duration, &mut flags));
                if start > end {
                    std::mem::swap(&mut start, &mut end);
                    flags.swapped = true;
                }
                Parsed::Interval { start, end }
            }
            _ => failure("expected two timestamps", &mut flags),
        },
        TaskId::PreCrashLocalization => match numbers(raw_text).first() {
            Some(&t) => Parsed::Point { time: clamp_time(t, duration, &mut flags) },
            None => failure("expected a timestamp", &mut flags),
        },
        TaskId::Description | TaskId::CausalReasoning | TaskId::PreventionReasoning => {
            Parsed::FreeText { text: raw_text.to_string() }
        }
    };
    PredictionRecord { video_id: video_id.to_string(), task, raw_text: raw_text.to_string(), parsed, flags }
}

/// Canonical answer text for a parsed interval or point, at 0.1 s precision.
pub fn canonical_text(parsed: &Parsed) -> Option<String> {
    match parsed {
        Parsed::Interval { start, end } => {
            Some(templates::crash_interval_answer(round_tenth(*start), round_tenth(*end)))
        }
        Parsed::Point { time } => Some(templates::precrash_answer(round_tenth(*time))),
        _ => None,
    }
}

/// How many generations each adapter block served.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvocationCounts {
    pub lc: usize,
    pub pc: usize,
}

impl InvocationCounts {
    pub fn get(&self, group: TaskGroup) -> usize {
        match group {
            TaskGroup::Lc => self.lc,
            TaskGroup::Pc => self.pc,
        }
    }

    pub fn merge(&mut self, other: InvocationCounts) {
        self.lc += other.lc;
        self.pc += other.pc;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InferenceResult {
    pub stage1_text: String,
    /// Stage-1 recognition verdict. False when stage 1 answered an understanding task.
    pub stage1_positive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_text: Option<String>,
    #[serde(rename = "final")]
    pub final_record: PredictionRecord,
    pub invocations: InvocationCounts,
}

/// Model plus tokenizer and decoding settings, with per-block invocation counting.
pub struct Inference<'a> {
    pub model: &'a CrashChat,
    pub tokenizer: &'a Tokenizer,
    pub decoding: DecodingConfig,
}

impl<'a> Inference<'a> {
    pub fn new(model: &'a CrashChat, tokenizer: &'a Tokenizer) -> Self {
        Self { model, tokenizer, decoding: DecodingConfig::default() }
    }

    fn run_block(
        &self,
        group: TaskGroup,
        video: &VideoTokens,
        prompt: &str,
        counts: &mut InvocationCounts,
    ) -> Result<Generation, ModelError> {
        match group {
            TaskGroup::Lc => counts.lc += 1,
            TaskGroup::Pc => counts.pc += 1,
        }
        let set = self.model.adapter(group);
        let z = self.model.prefix(video, set, &self.tokenizer.encode(prompt))?;
        self.model.generate(&z, Some(&set.lora), self.decoding, self.tokenizer)
    }

    pub fn infer(&self, video: &VideoSample, task: TaskId) -> Result<InferenceResult, ModelError> {
        let tokens = self.model.encode_video(video)?;
        let mut counts = InvocationCounts::default();
        let duration = video.duration();
        let id = video.video_id();
        let stage1_task = if task.group() == TaskGroup::Pc { TaskId::Recognition } else { task };
        let s1 = self.run_block(TaskGroup::Lc, &tokens, templates::question(stage1_task), &mut counts)?;
        let s1_record = parse_answer(id, &s1.text, stage1_task, duration);
        let stage1_positive = matches!(s1_record.parsed, Parsed::Boolean { value: true });
        if stage1_task == TaskId::Recognition && s1_record.flags.unparseable {
            log::debug!("{id}: stage-1 recognition unparseable ({:?}); treating as negative", s1.text);
        }
        if task.group() == TaskGroup::Lc {
            let mut final_record = s1_record;
            final_record.flags.truncated = s1.truncated;
            return Ok(InferenceResult {
                stage1_text: s1.text,
                stage1_positive,
                stage2_text: None,
                final_record,
                invocations: counts,
            });
        }
        let final_record = if stage1_positive {
            let s2 = self.run_block(TaskGroup::Pc, &tokens, templates::question(task), &mut counts)?;
            let mut r = parse_answer(id, &s2.text, task, duration);
            r.flags.truncated = s2.truncated;
            r
        } else {
            PredictionRecord {
                video_id: id.to_string(),
                task,
                raw_text: templates::REFUSAL.to_string(),
                parsed: Parsed::ParseFailure { reason: "no crash detected at stage 1".into() },
                flags: ParseFlags { gated: true, ..Default::default() },
            }
        };
        let stage2_text = (!final_record.flags.gated).then(|| final_record.raw_text.clone());
        Ok(InferenceResult { stage1_text: s1.text, stage1_positive, stage2_text, final_record, invocations: counts })
    }
}

impl Inference<'_> {
    /// Answers `task` in one pass through the `group` block, with no gate.
    /// Used to score a single regime's block on the tasks it was trained on.
    pub fn infer_direct(
        &self,
        video: &VideoSample,
        task: TaskId,
        group: TaskGroup,
        counts: &mut InvocationCounts,
    ) -> Result<PredictionRecord, ModelError> {
        let tokens = self.model.encode_video(video)?;
        let g = self.run_block(group, &tokens, templates::question(task), counts)?;
        let mut r = parse_answer(video.video_id(), &g.text, task, video.duration());
        r.flags.truncated = g.truncated;
        Ok(r)
    }
}

/// Counters accumulated over a batch of queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GatingStats {
    pub queries: usize,
    pub invocations: InvocationCounts,
    pub localization_queries: usize,
    /// Localization queries whose stage-1 recognition said "yes".
    pub localization_passed_gate: usize,
    pub unparseable_stage1: usize,
}

/// Runs every `(video, task)` query through the gated pipeline without looking at labels, so negatives
/// also receive localization queries and exercise the gate. Output is ordered
/// by video, then task.
pub fn infer_all(
    inf: &Inference<'_>,
    videos: &[VideoSample],
    tasks: &[TaskId],
) -> Result<(Vec<InferenceResult>, GatingStats), ModelError> {
    let mut out = Vec::new();
    let mut stats = GatingStats::default();
    for v in videos {
        for &task in tasks {
            let r = inf.infer(v, task)?;
            stats.queries += 1;
            stats.invocations.merge(r.invocations);
            if task.group() == TaskGroup::Pc {
                stats.localization_queries += 1;
                stats.localization_passed_gate += usize::from(r.stage1_positive);
            }
            if (task == TaskId::Recognition || task.group() == TaskGroup::Pc)
                && parse_answer(v.video_id(), &r.stage1_text, TaskId::Recognition, v.duration()).flags.unparseable
            {
                stats.unparseable_stage1 += 1;
            }
            out.push(r);
        }
    }
    Ok((out, stats))
}

/// Direct answers from one block. Localization is only asked of labelled
/// positives, since nothing else has a reference to score against.
pub fn infer_direct_all(
    inf: &Inference<'_>,
    videos: &[VideoSample],
    tasks: &[TaskId],
    group: TaskGroup,
) -> Result<(Vec<PredictionRecord>, InvocationCounts), ModelError> {
    let mut out = Vec::new();
    let mut counts = InvocationCounts::default();
    for v in videos {
        for &task in tasks {
            if task.requires_positive() && !v.label() {
                continue;
            }
            out.push(inf.infer_direct(v, task, group, &mut counts)?);
        }
    }
    Ok((out, counts))
}
