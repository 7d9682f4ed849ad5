//! Dataset construction: manifest ingestion, synthetic videos, QA templating
//! and stratified splits, plus the on-disk dataset directory layout.
//!
//! A dataset directory holds `videos.jsonl` (metadata), `frames.jsonl`
//! (features), `texts.jsonl` (reference texts of positives), `qa.jsonl` and,
//! once split, `split/{train,val,test}.jsonl` with `split/split_index.json`.

mod manifest;
mod qa;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Frames, QaPair, SchemaError, TaskId, VideoMeta, VideoSample};

pub use manifest::{ingest_manifest, write_manifest, IngestOptions, Ingested, ManifestEntry, RejectedEntry};
pub use qa::build_qa_pairs;
pub use split::{stratified_split, Split, SplitSpec, Subset};
pub use synthetic::{generate_synthetic, phase_frame, AnomalySignature, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("video `{video_id}` has no reference text for task {task}")]
    MissingText { video_id: String, task: TaskId },
    #[error("video `{0}` has no frames in the dataset directory")]
    MissingFrames(String),
}

/// Description, cause and prevention texts of one positive video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReferenceTexts {
    pub description: String,
    pub cause: String,
    pub prevention: String,
}

impl ReferenceTexts {
    pub fn get(&self, task: TaskId) -> Option<&str> {
        match task {
            TaskId::Description => Some(&self.description),
            TaskId::CausalReasoning => Some(&self.cause),
            TaskId::PreventionReasoning => Some(&self.prevention),
            _ => None,
        }
    }
}

/// Videos sorted by id plus the reference texts keyed by video id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<VideoSample>,
    pub texts: BTreeMap<String, ReferenceTexts>,
}

impl Dataset {
    pub fn num_positive(&self) -> usize {
        self.samples.iter().filter(|s| s.label()).count()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoSample> {
        self.samples.binary_search_by(|s| s.video_id().cmp(video_id)).ok().map(|i| &self.samples[i])
    }

    /// Keeps only the listed videos (and their texts).
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let mut out = Dataset::default();
        for id in ids {
            if let Some(s) = self.get(id) {
                out.samples.push(s.clone());
                if let Some(t) = self.texts.get(id) {
                    out.texts.insert(id.clone(), t.clone());
                }
            }
        }
        out.samples.sort_by(|a, b| a.video_id().cmp(b.video_id()));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::Io(dir.to_path_buf(), e))?;
        let metas: Vec<VideoMeta> = self.samples.iter().map(VideoSample::meta).collect();
        write_jsonl(&dir.join(VIDEOS_FILE), &metas)?;
        let frames: Vec<FrameRecord> = self
            .samples
            .iter()
            .map(|s| FrameRecord {
                video_id: s.video_id().to_string(),
                feature_dim: s.frames().dim(),
                frames: s.frames().rows().map(<[f64]>::to_vec).collect(),
            })
            .collect();
        write_jsonl(&dir.join(FRAMES_FILE), &frames)?;
        let texts: Vec<TextRecord> =
            self.texts.iter().map(|(id, t)| TextRecord { video_id: id.clone(), texts: t.clone() }).collect();
        write_jsonl(&dir.join(TEXTS_FILE), &texts)
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let metas: Vec<VideoMeta> = read_jsonl(&dir.join(VIDEOS_FILE))?;
        let frames: Vec<FrameRecord> = read_jsonl(&dir.join(FRAMES_FILE))?;
        let mut frames: BTreeMap<String, FrameRecord> = frames.into_iter().map(|f| (f.video_id.clone(), f)).collect();
        let mut ds = Dataset::default();
        for m in metas {
            let rec = frames.remove(&m.video_id).ok_or_else(|| DatasetError::MissingFrames(m.video_id.clone()))?;
            let data: Vec<f64> = rec.frames.into_iter().flatten().collect();
            let f = Frames::new(rec.feature_dim, data)?;
            ds.samples.push(VideoSample::new(m.video_id, f, m.fps, m.annotation, m.source)?);
        }
        ds.samples.sort_by(|a, b| a.video_id().cmp(b.video_id()));
        let texts_path = dir.join(TEXTS_FILE);
        if texts_path.exists() {
            let texts: Vec<TextRecord> = read_jsonl(&texts_path)?;
            ds.texts = texts.into_iter().map(|t| (t.video_id, t.texts)).collect();
        }
        Ok(ds)
    }
}

pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const TEXTS_FILE: &str = "texts.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const SPLIT_DIR: &str = "split";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct FrameRecord {
    video_id: String,
    feature_dim: usize,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TextRecord {
    video_id: String,
    #[serde(flatten)]
    texts: ReferenceTexts,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let io = |e| DatasetError::Io(path.to_path_buf(), e);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let io = |e| DatasetError::Io(path.to_path_buf(), e);
    let r = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_qa(dir: &Path) -> Result<Vec<QaPair>, DatasetError> {
    read_jsonl(&dir.join(QA_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip() {
        let cfg = SyntheticConfig { num_positive: 3, num_negative: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.texts, ds.texts);
        assert_eq!(back.samples.len(), 5);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.meta(), b.meta());
            assert_eq!(a.frames(), b.frames());
        }
    }

    #[test]
    fn subset_keeps_texts() {
        let cfg = SyntheticConfig { num_positive: 2, num_negative: 2, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let sub = ds.subset(&["syn-pos-00001".into(), "syn-neg-00000".into(), "nope".into()]);
        assert_eq!(sub.samples.len(), 2);
        assert_eq!(sub.texts.len(), 1);
        assert_eq!(sub.samples[0].video_id(), "syn-neg-00000");
    }
}
