//! Fixed prompt templates, canonical answer formats and the closed phrase
//! vocabulary used for synthetic reference texts.
//!
//! Every string the toy model is expected to emit is built from this file, which
//! is also where the tokenizer vocabulary comes from.

use crate::schema::TaskId;

/// Final answer for localization queries on videos judged crash-free.
pub const REFUSAL: &str = "No crash is detected in this video.";

pub const RECOGNITION_YES: &str = "Yes, this video contains a traffic crash.";
pub const RECOGNITION_NO: &str = "No, this video shows normal driving.";

pub const NEGATIVE_DESCRIPTION: &str = "No crash occurred in this video.";
pub const NEGATIVE_CAUSE: &str = "No crash occurred, so there is no cause.";
pub const NEGATIVE_PREVENTION: &str = "No crash occurred, so no prevention is needed.";

/// The single question asked for each task.
pub fn question(task: TaskId) -> &'static str {
    match task {
        TaskId::Recognition => "Does this video contain a traffic crash?",
        TaskId::Description => "Describe the crash in this video.",
        TaskId::CausalReasoning => "What caused the crash in this video?",
        TaskId::PreventionReasoning => "How could the crash have been prevented?",
        TaskId::CrashLocalization => "When does the crash occur?",
        TaskId::PreCrashLocalization => "When do the first signs of the crash appear?",
    }
}

/// `The crash occurs from {t1:.1f}s to {t2:.1f}s.`
pub fn crash_interval_answer(start: f64, end: f64) -> String {
    format!("The crash occurs from {start:.1}s to {end:.1}s.")
}

/// `Signs of an imminent crash first appear at {t:.1f}s.`
pub fn precrash_answer(t: f64) -> String {
    format!("Signs of an imminent crash first appear at {t:.1}s.")
}

pub fn recognition_answer(positive: bool) -> &'static str {
    if positive {
        RECOGNITION_YES
    } else {
        RECOGNITION_NO
    }
}

/// Reference answer for tasks b-d on a crash-free video.
pub fn negative_answer(task: TaskId) -> Option<&'static str> {
    match task {
        TaskId::Description => Some(NEGATIVE_DESCRIPTION),
        TaskId::CausalReasoning => Some(NEGATIVE_CAUSE),
        TaskId::PreventionReasoning => Some(NEGATIVE_PREVENTION),
        _ => None,
    }
}

/// Kinds of synthetic crash. Each one owns a spike direction in feature space
/// and a fixed description, cause and prevention phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashKind {
    pub description: &'static str,
    pub cause: &'static str,
    pub prevention: &'static str,
}

pub const CRASH_KINDS: [CrashKind; 4] = [
    CrashKind {
        description: "The ego vehicle rear-ends a slowing car",
        cause: "The ego vehicle followed too closely and braked late.",
        prevention: "Keep a safe following distance and brake earlier.",
    },
    CrashKind {
        description: "A crossing car strikes the ego vehicle from the side",
        cause: "The crossing car ran a red light.",
        prevention: "Check cross traffic before entering the intersection.",
    },
    CrashKind {
        description: "The ego vehicle hits a pedestrian crossing the road",
        cause: "The pedestrian crossed suddenly and the driver was distracted.",
        prevention: "Slow down and watch for pedestrians near crosswalks.",
    },
    CrashKind {
        description: "A motorcycle collides with the ego vehicle during a lane change",
        cause: "The driver changed lanes without checking the blind spot.",
        prevention: "Check mirrors and blind spots before changing lanes.",
    },
];

/// Scene phrases appended to synthetic descriptions. The scene is visible in
/// every frame through a baseline feature offset.
pub const SCENES: [&str; 3] = ["at an intersection", "on a highway", "on a city street"];

pub fn synthetic_description(kind: usize, scene: usize) -> String {
    format!("{} {}.", CRASH_KINDS[kind].description, SCENES[scene])
}

/// Every fixed sentence the templates can produce, used to build the vocabulary.
pub fn corpus() -> Vec<String> {
    let mut out: Vec<String> = TaskId::ALL.iter().map(|t| question(*t).to_string()).collect();
    out.extend(
        [REFUSAL, RECOGNITION_YES, RECOGNITION_NO, NEGATIVE_DESCRIPTION, NEGATIVE_CAUSE, NEGATIVE_PREVENTION]
            .map(String::from),
    );
    out.push(crash_interval_answer(0.0, 0.0));
    out.push(precrash_answer(0.0));
    for (k, kind) in CRASH_KINDS.iter().enumerate() {
        for s in 0..SCENES.len() {
            out.push(synthetic_description(k, s));
        }
        out.push(kind.cause.to_string());
        out.push(kind.prevention.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_formats_are_bit_exact() {
        assert_eq!(crash_interval_answer(12.3, 15.0), "The crash occurs from 12.3s to 15.0s.");
        assert_eq!(precrash_answer(47.0), "Signs of an imminent crash first appear at 47.0s.");
        assert_eq!(precrash_answer(3.04), "Signs of an imminent crash first appear at 3.0s.");
    }

    #[test]
    fn recognition_answers_lead_with_yes_no() {
        assert!(recognition_answer(true).starts_with("Yes,"));
        assert!(recognition_answer(false).starts_with("No,"));
    }

    #[test]
    fn every_task_has_a_distinct_question() {
        let mut qs: Vec<_> = TaskId::ALL.iter().map(|t| question(*t)).collect();
        qs.sort();
        qs.dedup();
        assert_eq!(qs.len(), 6);
    }
}
