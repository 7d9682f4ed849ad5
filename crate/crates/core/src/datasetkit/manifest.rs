//! JSON-lines manifest ingestion.
//!
//! One entry per line. Malformed entries are collected as rejections and the
//! rest of the file is still ingested; only an unreadable file is fatal.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::{render, AnomalySignature, RenderSpec, Signature};
use super::{Dataset, DatasetError, ReferenceTexts};
use crate::schema::{Frames, Source, TemporalAnnotation, VideoSample};
use crate::templates::{CRASH_KINDS, SCENES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestEntry {
    pub video_id: String,
    pub source: Source,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<TemporalAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prevention_text: Option<String>,
    /// JSON file holding an array of frame feature rows, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    /// Duration for placeholder frames of negative entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

/// Controls placeholder frames generated for entries without a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct IngestOptions {
    pub feature_dim: usize,
    pub default_fps: f64,
    pub default_duration: f64,
    pub noise_scale: f64,
    pub anomaly_signature: AnomalySignature,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            default_fps: 5.0,
            default_duration: 10.0,
            noise_scale: 0.3,
            anomaly_signature: AnomalySignature::default(),
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RejectedEntry {
    /// 1-based line number in the manifest.
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rejected: Vec<RejectedEntry>,
}

#[derive(Deserialize)]
struct FeatureFile {
    frames: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeaturePayload {
    Wrapped(FeatureFile),
    Bare(Vec<Vec<f64>>),
}

fn id_seed(seed: u64, video_id: &str) -> u64 {
    let digest = Sha256::digest(video_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap()) ^ seed
}

fn load_features(path: &Path) -> Result<Frames, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read features {}: {e}", path.display()))?;
    let rows = match serde_json::from_str::<FeaturePayload>(&text) {
        Ok(FeaturePayload::Wrapped(f)) => f.frames,
        Ok(FeaturePayload::Bare(rows)) => rows,
        Err(e) => return Err(format!("bad feature file {}: {e}", path.display())),
    };
    Frames::from_rows(&rows).map_err(|e| e.to_string())
}

fn texts_of(e: &ManifestEntry) -> Result<Option<ReferenceTexts>, String> {
    if !e.label {
        return Ok(None);
    }
    let get = |v: &Option<String>, what: &str| {
        v.clone().filter(|s| !s.trim().is_empty()).ok_or_else(|| format!("missing {what}"))
    };
    Ok(Some(ReferenceTexts {
        description: get(&e.description_text, "description text")?,
        cause: get(&e.cause_text, "cause text")?,
        prevention: get(&e.prevention_text, "prevention text")?,
    }))
}

fn build_sample(
    e: &ManifestEntry,
    base_dir: &Path,
    opts: &IngestOptions,
    sig: &Signature,
) -> Result<VideoSample, String> {
    if e.video_id.trim().is_empty() {
        return Err("empty videoId".into());
    }
    match (e.label, &e.annotation) {
        (true, None) => return Err("missing annotation".into()),
        (false, Some(_)) => return Err("annotation on negative entry".into()),
        _ => {}
    }
    let fps = e.fps.unwrap_or(opts.default_fps);
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(format!("invalid fps {fps}"));
    }
    let frames = match &e.features_path {
        Some(p) => load_features(&base_dir.join(p))?,
        None => {
            let duration = e.annotation.map(|a| a.duration()).or(e.duration).unwrap_or(opts.default_duration);
            if !(duration > 0.0) {
                return Err(format!("invalid duration {duration}"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(id_seed(opts.seed, &e.video_id));
            let h = id_seed(0, &e.video_id) as usize;
            let spec = RenderSpec {
                n_frames: ((duration * fps).round() as usize).max(1),
                fps,
                annotation: e.annotation.as_ref(),
                kind: h % CRASH_KINDS.len(),
                scene: (h / CRASH_KINDS.len()) % SCENES.len(),
                noise: opts.noise_scale,
                anomaly: &opts.anomaly_signature,
            };
            Frames::new(opts.feature_dim, render(sig, &spec, &mut rng)).map_err(|e| e.to_string())?
        }
    };
    VideoSample::new(e.video_id.clone(), frames, fps, e.annotation, e.source).map_err(|e| e.to_string())
}

/// Reads a manifest. Entries without `featuresPath` get deterministic
/// placeholder frames rendered from their annotation.
pub fn ingest_manifest(path: &Path, opts: &IngestOptions) -> Result<Ingested, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let sig = Signature::new(opts.seed, opts.feature_dim);
    let mut out = Ingested::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let reject = |video_id: Option<String>, reason: String| RejectedEntry { line: i + 1, video_id, reason };
        let entry: ManifestEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(err) => {
                out.rejected.push(reject(None, format!("malformed entry: {err}")));
                continue;
            }
        };
        let id = Some(entry.video_id.clone());
        if !seen.insert(entry.video_id.clone()) {
            out.rejected.push(reject(id, "duplicate videoId".into()));
            continue;
        }
        let result = build_sample(&entry, base_dir, opts, &sig).and_then(|s| texts_of(&entry).map(|t| (s, t)));
        match result {
            Ok((sample, texts)) => {
                if let Some(t) = texts {
                    out.dataset.texts.insert(entry.video_id.clone(), t);
                }
                out.dataset.samples.push(sample);
            }
            Err(reason) => out.rejected.push(reject(id, reason)),
        }
    }
    for r in &out.rejected {
        log::warn!("manifest line {}: rejected ({})", r.line, r.reason);
    }
    out.dataset.samples.sort_by(|a, b| a.video_id().cmp(b.video_id()));
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    super::write_jsonl(path, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn entry(id: &str, label: bool) -> ManifestEntry {
        ManifestEntry {
            video_id: id.into(),
            source: if label { Source::MmAu } else { Source::D2City },
            label,
            annotation: label.then(|| TemporalAnnotation::new(1.0, 2.0, 3.0, 4.0).unwrap()),
            description_text: label.then(|| "A car hits a wall.".into()),
            cause_text: label.then(|| "Speeding.".into()),
            prevention_text: label.then(|| "Slow down.".into()),
            features_path: None,
            fps: None,
            duration: (!label).then_some(2.0),
        }
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        let out = ingest_manifest(&p, &IngestOptions::default()).unwrap();
        assert!(out.dataset.samples.is_empty());
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn unreadable_manifest_is_fatal() {
        let err = ingest_manifest(Path::new("/nonexistent/m.jsonl"), &IngestOptions::default());
        assert!(matches!(err, Err(DatasetError::Io(..))));
    }

    #[test]
    fn positive_without_annotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut bad = entry("p1", true);
        bad.annotation = None;
        write_manifest(&p, &[entry("p0", true), bad, entry("n0", false)]).unwrap();
        let out = ingest_manifest(&p, &IngestOptions::default()).unwrap();
        assert_eq!(out.dataset.samples.len(), 2);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].reason, "missing annotation");
        assert_eq!(out.rejected[0].line, 2);
    }

    #[test]
    fn malformed_and_duplicate_lines_are_non_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        let good = serde_json::to_string(&entry("n0", false)).unwrap();
        writeln!(f, "{good}").unwrap();
        writeln!(f, "{{not json").unwrap();
        writeln!(f, "{good}").unwrap();
        let mut no_text = entry("p0", true);
        no_text.cause_text = None;
        writeln!(f, "{}", serde_json::to_string(&no_text).unwrap()).unwrap();
        drop(f);
        let out = ingest_manifest(&p, &IngestOptions::default()).unwrap();
        assert_eq!(out.dataset.samples.len(), 1);
        let reasons: Vec<_> = out.rejected.iter().map(|r| r.reason.as_str()).collect();
        assert!(reasons[0].starts_with("malformed entry"));
        assert_eq!(reasons[1], "duplicate videoId");
        assert_eq!(reasons[2], "missing cause text");
    }

    #[test]
    fn feature_files_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("f.json"), "[[1,2],[3,4],[5,6]]").unwrap();
        fs::write(dir.path().join("g.json"), r#"{"frames":[[1,2]]}"#).unwrap();
        let mut a = entry("a", false);
        a.features_path = Some("f.json".into());
        a.fps = Some(3.0);
        let mut b = entry("b", false);
        b.features_path = Some("g.json".into());
        let mut c = entry("c", false);
        c.features_path = Some("missing.json".into());
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &[a, b, c]).unwrap();
        let out = ingest_manifest(&p, &IngestOptions::default()).unwrap();
        assert_eq!(out.dataset.samples.len(), 2);
        assert_eq!(out.dataset.samples[0].frames().row(2), &[5.0, 6.0]);
        assert_eq!(out.dataset.samples[0].duration(), 1.0);
        assert_eq!(out.rejected.len(), 1);
    }

    #[test]
    fn placeholders_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &[entry("p0", true), entry("n0", false)]).unwrap();
        let a = ingest_manifest(&p, &IngestOptions::default()).unwrap();
        let b = ingest_manifest(&p, &IngestOptions::default()).unwrap();
        assert_eq!(a.dataset.samples, b.dataset.samples);
        assert_eq!(a.dataset.samples[1].frames().len(), 20);
    }
}
