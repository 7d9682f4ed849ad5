//! Shared domain types: the six-task taxonomy, videos, QA pairs and parsed predictions.
//!
//! Everything here is immutable once constructed. Constructors validate the
//! invariants so downstream modules can rely on them without re-checking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default pre-crash tolerance window in seconds.
pub const DEFAULT_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("unknown task `{0}` (expected one of a-f)")]
    UnknownTask(String),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("invalid temporal annotation: {0}")]
    Annotation(String),
    #[error("invalid video `{video_id}`: {reason}")]
    Video { video_id: String, reason: String },
}

/// The two task groups. `Lc` is linguistic-centric, `Pc` perception-centric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskGroup {
    #[serde(rename = "lc")]
    Lc,
    #[serde(rename = "pc")]
    Pc,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 2] = [TaskGroup::Lc, TaskGroup::Pc];

    pub fn tasks(self) -> &'static [TaskId] {
        match self {
            TaskGroup::Lc => &TaskId::LINGUISTIC,
            TaskGroup::Pc => &TaskId::PERCEPTION,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskGroup::Lc => "lc",
            TaskGroup::Pc => "pc",
        }
    }
}

impl fmt::Display for TaskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskGroup::Lc => "Lc",
            TaskGroup::Pc => "Pc",
        })
    }
}

impl FromStr for TaskGroup {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lc" => Ok(TaskGroup::Lc),
            "pc" => Ok(TaskGroup::Pc),
            other => Err(SchemaError::UnknownTask(other.to_string())),
        }
    }
}

/// The six crash-analysis tasks, labelled a-f.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Recognition,
    Description,
    CausalReasoning,
    PreventionReasoning,
    CrashLocalization,
    PreCrashLocalization,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::Recognition,
        TaskId::Description,
        TaskId::CausalReasoning,
        TaskId::PreventionReasoning,
        TaskId::CrashLocalization,
        TaskId::PreCrashLocalization,
    ];
    pub const LINGUISTIC: [TaskId; 4] =
        [TaskId::Recognition, TaskId::Description, TaskId::CausalReasoning, TaskId::PreventionReasoning];
    pub const PERCEPTION: [TaskId; 2] = [TaskId::CrashLocalization, TaskId::PreCrashLocalization];

    pub fn letter(self) -> char {
        match self {
            TaskId::Recognition => 'a',
            TaskId::Description => 'b',
            TaskId::CausalReasoning => 'c',
            TaskId::PreventionReasoning => 'd',
            TaskId::CrashLocalization => 'e',
            TaskId::PreCrashLocalization => 'f',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Recognition => "Crash recognition",
            TaskId::Description => "Crash description",
            TaskId::CausalReasoning => "Causal reasoning",
            TaskId::PreventionReasoning => "Prevention reasoning",
            TaskId::CrashLocalization => "Crash localization",
            TaskId::PreCrashLocalization => "Pre-crash localization",
        }
    }

    pub fn group(self) -> TaskGroup {
        group_of(self)
    }

    /// Tasks that only exist for videos containing a crash.
    pub fn requires_positive(self) -> bool {
        self.group() == TaskGroup::Pc
    }

    /// Parses a comma separated list such as `a,b,e`.
    pub fn parse_list(s: &str) -> Result<Vec<TaskId>, SchemaError> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(TaskId::from_str).collect()
    }
}

/// Maps each task onto the group whose projector and adapter serve it.
pub fn group_of(task: TaskId) -> TaskGroup {
    match task {
        TaskId::Recognition | TaskId::Description | TaskId::CausalReasoning | TaskId::PreventionReasoning => {
            TaskGroup::Lc
        }
        TaskId::CrashLocalization | TaskId::PreCrashLocalization => TaskGroup::Pc,
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for TaskId {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = match s.trim().to_ascii_lowercase().as_str() {
            "a" | "recognition" => TaskId::Recognition,
            "b" | "description" => TaskId::Description,
            "c" | "causalreasoning" | "causal" => TaskId::CausalReasoning,
            "d" | "preventionreasoning" | "prevention" => TaskId::PreventionReasoning,
            "e" | "crashlocalization" => TaskId::CrashLocalization,
            "f" | "precrashlocalization" => TaskId::PreCrashLocalization,
            other => return Err(SchemaError::UnknownTask(other.to_string())),
        };
        Ok(t)
    }
}

impl Serialize for TaskId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        s.serialize_str(self.letter().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where a video came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "MM-AU")]
    MmAu,
    Nexar,
    D2City,
    Synthetic,
}

impl FromStr for Source {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MM-AU" | "mmau" | "mm-au" => Ok(Source::MmAu),
            "Nexar" | "nexar" => Ok(Source::Nexar),
            "D2City" | "d2city" => Ok(Source::D2City),
            "Synthetic" | "synthetic" => Ok(Source::Synthetic),
            other => Err(SchemaError::UnknownSource(other.to_string())),
        }
    }
}

/// Rounds a timestamp to the 0.1 s grid used on disk.
pub fn round_tenth(t: f64) -> f64 {
    (t * 10.0).round() / 10.0
}

fn ser_tenth<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_tenth(*v))
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

/// Crash timing of a positive video. `crash_start` is the end of the
/// pre-crash phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", try_from = "RawAnnotation")]
pub struct TemporalAnnotation {
    #[serde(serialize_with = "ser_tenth")]
    pre_crash_start: f64,
    #[serde(serialize_with = "ser_tenth")]
    crash_start: f64,
    #[serde(serialize_with = "ser_tenth")]
    crash_end: f64,
    #[serde(serialize_with = "ser_tenth")]
    duration: f64,
    tolerance: f64,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawAnnotation {
    pre_crash_start: f64,
    crash_start: f64,
    crash_end: f64,
    duration: f64,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
}

impl TryFrom<RawAnnotation> for TemporalAnnotation {
    type Error = SchemaError;

    fn try_from(r: RawAnnotation) -> Result<Self, Self::Error> {
        TemporalAnnotation::with_tolerance(r.pre_crash_start, r.crash_start, r.crash_end, r.duration, r.tolerance)
    }
}

impl TemporalAnnotation {
    pub fn new(pre_crash_start: f64, crash_start: f64, crash_end: f64, duration: f64) -> Result<Self, SchemaError> {
        Self::with_tolerance(pre_crash_start, crash_start, crash_end, duration, DEFAULT_TOLERANCE)
    }

    pub fn with_tolerance(
        pre_crash_start: f64,
        crash_start: f64,
        crash_end: f64,
        duration: f64,
        tolerance: f64,
    ) -> Result<Self, SchemaError> {
        let all = [pre_crash_start, crash_start, crash_end, duration, tolerance];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SchemaError::Annotation("non-finite timestamp".into()));
        }
        if !(0.0 <= pre_crash_start
            && pre_crash_start <= crash_start
            && crash_start <= crash_end
            && crash_end <= duration)
        {
            return Err(SchemaError::Annotation(format!(
                "expected 0 <= {pre_crash_start} <= {crash_start} <= {crash_end} <= {duration}"
            )));
        }
        if tolerance <= 0.0 {
            return Err(SchemaError::Annotation(format!("tolerance must be > 0, got {tolerance}")));
        }
        Ok(Self { pre_crash_start, crash_start, crash_end, duration, tolerance })
    }

    pub fn pre_crash_start(&self) -> f64 {
        self.pre_crash_start
    }
    pub fn crash_start(&self) -> f64 {
        self.crash_start
    }
    pub fn crash_end(&self) -> f64 {
        self.crash_end
    }
    pub fn duration(&self) -> f64 {
        self.duration
    }
    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

/// Row-major frame feature matrix, one row per sampled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    dim: usize,
    data: Vec<f64>,
}

impl Frames {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, SchemaError> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(SchemaError::Video {
                video_id: String::new(),
                reason: format!("frame buffer of {} values is not a non-empty multiple of {dim}", data.len()),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SchemaError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(SchemaError::Video { video_id: String::new(), reason: "ragged frame rows".into() });
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A video reduced to per-frame feature vectors plus its crash label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    video_id: String,
    frames: Frames,
    fps: f64,
    label: bool,
    annotation: Option<TemporalAnnotation>,
    source: Source,
}

impl VideoSample {
    pub fn new(
        video_id: impl Into<String>,
        frames: Frames,
        fps: f64,
        annotation: Option<TemporalAnnotation>,
        source: Source,
    ) -> Result<Self, SchemaError> {
        let video_id = video_id.into();
        let err = |reason: String| SchemaError::Video { video_id: video_id.clone(), reason };
        if video_id.is_empty() {
            return Err(err("empty video id".into()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(err(format!("fps must be positive, got {fps}")));
        }
        let duration = frames.len() as f64 / fps;
        if let Some(ann) = &annotation {
            // Annotation duration may differ from the sampled duration by less than a frame.
            if (ann.duration() - duration).abs() > 1.0 / fps + 1e-9 {
                return Err(err(format!(
                    "annotation duration {} disagrees with {} frames at {fps} fps",
                    ann.duration(),
                    frames.len()
                )));
            }
        }
        Ok(Self { label: annotation.is_some(), video_id, frames, fps, annotation, source })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }
    pub fn frames(&self) -> &Frames {
        &self.frames
    }
    pub fn fps(&self) -> f64 {
        self.fps
    }
    pub fn label(&self) -> bool {
        self.label
    }
    pub fn annotation(&self) -> Option<&TemporalAnnotation> {
        self.annotation.as_ref()
    }
    pub fn source(&self) -> Source {
        self.source
    }

    /// Duration in seconds, `frame count / fps`.
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn meta(&self) -> VideoMeta {
        VideoMeta {
            video_id: self.video_id.clone(),
            label: self.label,
            annotation: self.annotation,
            source: self.source,
            fps: self.fps,
            num_frames: self.frames.len(),
            feature_dim: self.frames.dim(),
        }
    }
}

/// Frame-free view of a [`VideoSample`], the JSON-lines record for videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VideoMeta {
    pub video_id: String,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<TemporalAnnotation>,
    pub source: Source,
    pub fps: f64,
    pub num_frames: usize,
    pub feature_dim: usize,
}

/// One task-tagged question with its reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QaPair {
    pub video_id: String,
    pub task: TaskId,
    pub question: String,
    pub reference_answer: String,
}

/// Structured content extracted from a generated answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Parsed {
    Boolean { value: bool },
    Interval { start: f64, end: f64 },
    Point { time: f64 },
    FreeText { text: String },
    ParseFailure { reason: String },
}

impl Parsed {
    pub fn is_failure(&self) -> bool {
        matches!(self, Parsed::ParseFailure { .. })
    }

    /// Whether this variant is the one a task expects (failures always fit).
    pub fn matches_task(&self, task: TaskId) -> bool {
        match (self, task) {
            (Parsed::ParseFailure { .. }, _) => true,
            (Parsed::Boolean { .. }, TaskId::Recognition) => true,
            (Parsed::Interval { .. }, TaskId::CrashLocalization) => true,
            (Parsed::Point { .. }, TaskId::PreCrashLocalization) => true,
            (Parsed::FreeText { .. }, TaskId::Description | TaskId::CausalReasoning | TaskId::PreventionReasoning) => {
                true
            }
            _ => false,
        }
    }
}

/// Audit flags raised while parsing an answer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParseFlags {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub swapped: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparseable: bool,
    /// Generation hit the length cap before the end token.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    /// Localization query answered with the refusal because stage 1 said negative.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PredictionRecord {
    pub video_id: String,
    pub task: TaskId,
    pub raw_text: String,
    pub parsed: Parsed,
    #[serde(default)]
    pub flags: ParseFlags,
}
