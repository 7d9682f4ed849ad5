//! Desk-scale stand-in for real dashcam footage.
//!
//! Every frame is a scene offset plus Gaussian noise. Positive videos add a
//! constant drift along a shared direction from the pre-crash start, then from
//! the crash start a kind-specific spike with extra noise until the crash ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, ReferenceTexts};
use crate::schema::{round_tenth, Frames, Source, TemporalAnnotation, VideoSample};
use crate::templates::{self, CRASH_KINDS, SCENES};

/// Strength of the injected crash signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AnomalySignature {
    /// Length of the mean shift added from the pre-crash start onward.
    pub drift_magnitude: f64,
    /// Length of the kind-specific offset added during the crash.
    pub spike_magnitude: f64,
    /// Extra per-dimension noise standard deviation during the crash.
    pub spike_noise: f64,
    /// Length of the scene offset present in every frame.
    pub scene_magnitude: f64,
}

impl Default for AnomalySignature {
    fn default() -> Self {
        Self { drift_magnitude: 1.5, spike_magnitude: 2.5, spike_noise: 0.6, scene_magnitude: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SyntheticConfig {
    pub num_positive: usize,
    pub num_negative: usize,
    pub fps: f64,
    /// Inclusive `[min, max]` duration in seconds.
    pub duration_range: (f64, f64),
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub anomaly_signature: AnomalySignature,
    /// Grid, in seconds, that injected timestamps are drawn on.
    pub time_resolution: f64,
    /// Inclusive `[min, max]` length of the pre-crash phase in seconds.
    pub precrash_range: (f64, f64),
    /// Inclusive `[min, max]` length of the crash phase in seconds.
    pub crash_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_positive: 200,
            num_negative: 200,
            fps: 5.0,
            duration_range: (10.0, 20.0),
            feature_dim: 16,
            noise_scale: 0.3,
            anomaly_signature: AnomalySignature::default(),
            time_resolution: 1.0,
            precrash_range: (2.0, 4.0),
            crash_range: (2.0, 4.0),
            seed: 2024,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Config(m.to_string()));
        if !(self.fps > 0.0) || self.feature_dim == 0 {
            return bad("fps and featureDim must be positive");
        }
        if !(self.time_resolution > 0.0) {
            return bad("timeResolution must be positive");
        }
        let (lo, hi) = self.duration_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("durationRange must satisfy 0 < min <= max");
        }
        for (name, (a, b)) in [("precrashRange", self.precrash_range), ("crashRange", self.crash_range)] {
            if !(a > 0.0 && a <= b) {
                return Err(DatasetError::Config(format!("{name} must satisfy 0 < min <= max")));
            }
        }
        if self.num_positive > 0 && self.precrash_range.1 + self.crash_range.1 + self.time_resolution > lo {
            return bad("shortest duration cannot hold the longest pre-crash and crash phases");
        }
        if self.noise_scale < 0.0 {
            return bad("noiseScale must be >= 0");
        }
        Ok(())
    }
}

/// Feature-space directions shared by every video of one generator seed.
pub(crate) struct Signature {
    drift: Vec<f64>,
    kinds: Vec<Vec<f64>>,
    scenes: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

impl Signature {
    pub(crate) fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4E41_5455_5245);
        Self {
            drift: unit_vector(&mut rng, dim),
            kinds: (0..CRASH_KINDS.len()).map(|_| unit_vector(&mut rng, dim)).collect(),
            scenes: (0..SCENES.len()).map(|_| unit_vector(&mut rng, dim)).collect(),
        }
    }
}

/// Parameters of one rendered video.
pub(crate) struct RenderSpec<'a> {
    pub n_frames: usize,
    pub fps: f64,
    pub annotation: Option<&'a TemporalAnnotation>,
    pub kind: usize,
    pub scene: usize,
    pub noise: f64,
    pub anomaly: &'a AnomalySignature,
}

/// Frame index where a phase starting at `t` seconds begins.
pub fn phase_frame(t: f64, fps: f64) -> usize {
    // Timestamps sit on a 0.1 s grid; the epsilon keeps e.g. 2.3 * 10 from flooring to 22.
    (t * fps + 1e-9).floor() as usize
}

pub(crate) fn render(sig: &Signature, spec: &RenderSpec<'_>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = sig.drift.len();
    let a = spec.anomaly;
    let phases = spec.annotation.map(|ann| {
        (
            phase_frame(ann.pre_crash_start(), spec.fps),
            phase_frame(ann.crash_start(), spec.fps),
            phase_frame(ann.crash_end(), spec.fps),
        )
    });
    let mut out = Vec::with_capacity(spec.n_frames * dim);
    for i in 0..spec.n_frames {
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            let mut x = a.scene_magnitude * sig.scenes[spec.scene][j] + spec.noise * z;
            if let Some((drift_at, crash_at, crash_end)) = phases {
                if i >= drift_at && i < crash_end {
                    x += a.drift_magnitude * sig.drift[j];
                }
                if i >= crash_at && i < crash_end {
                    let z2: f64 = StandardNormal.sample(rng);
                    x += a.spike_magnitude * sig.kinds[spec.kind][j] + a.spike_noise * z2;
                }
            }
            out.push(x);
        }
    }
    out
}

fn grid_draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64, step: f64) -> f64 {
    let steps = ((hi - lo) / step + 1e-9).floor() as u64;
    round_tenth(lo + step * rng.random_range(0..=steps) as f64)
}

/// Generates `num_positive + num_negative` videos with reference texts, sorted by id.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let sig = Signature::new(cfg.seed, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q = cfg.time_resolution;
    let mut ds = Dataset::default();
    for (positive, count) in [(true, cfg.num_positive), (false, cfg.num_negative)] {
        for i in 0..count {
            let duration = grid_draw(&mut rng, cfg.duration_range.0, cfg.duration_range.1, q);
            let n_frames = ((duration * cfg.fps).round() as usize).max(1);
            let duration = n_frames as f64 / cfg.fps;
            let kind = rng.random_range(0..CRASH_KINDS.len());
            let scene = rng.random_range(0..SCENES.len());
            let annotation = if positive {
                let pre = grid_draw(&mut rng, cfg.precrash_range.0, cfg.precrash_range.1, q);
                let crash = grid_draw(&mut rng, cfg.crash_range.0, cfg.crash_range.1, q);
                let t_ar = grid_draw(&mut rng, q, duration - pre - crash, q);
                let t_ai = round_tenth(t_ar + pre);
                let end = round_tenth(t_ai + crash);
                Some(TemporalAnnotation::new(t_ar, t_ai, end, duration)?)
            } else {
                None
            };
            let spec = RenderSpec {
                n_frames,
                fps: cfg.fps,
                annotation: annotation.as_ref(),
                kind,
                scene,
                noise: cfg.noise_scale,
                anomaly: &cfg.anomaly_signature,
            };
            let data = render(&sig, &spec, &mut rng);
            let id = format!("syn-{}-{i:05}", if positive { "pos" } else { "neg" });
            let frames = Frames::new(cfg.feature_dim, data)?;
            let sample = VideoSample::new(id.clone(), frames, cfg.fps, annotation, Source::Synthetic)?;
            if positive {
                let k = &CRASH_KINDS[kind];
                ds.texts.insert(
                    id,
                    ReferenceTexts {
                        description: templates::synthetic_description(kind, scene),
                        cause: k.cause.to_string(),
                        prevention: k.prevention.to_string(),
                    },
                );
            }
            ds.samples.push(sample);
        }
    }
    ds.samples.sort_by(|a, b| a.video_id().cmp(b.video_id()));
    Ok(ds)
}
