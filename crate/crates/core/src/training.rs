//! Supervised fine-tuning of one adapter block under the three multitask regimes.
//!
//! Only the target group's projector and low-rank factors are optimized; the
//! encoder, backbone and the other group's block are never written.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasetkit::{build_qa_pairs, phase_frame, Dataset};
use crate::model::{AdapterSet, BlockRole, Checkpoint, CrashChat, ModelError, SftExample, VideoTokens};
use crate::schema::{round_tenth, Frames, TaskGroup, TaskId, TemporalAnnotation, VideoSample};
use crate::tokenizer::{Tokenizer, EOS_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::datasetkit::DatasetError),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training examples for task(s) {0}")]
    EmptyTaskSubset(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (tasks {tasks}): {value}")]
    NonFinite { epoch: usize, batch: usize, tasks: String, value: f64 },
    #[error("cannot assemble: {0}")]
    Role(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which tasks are trained together and which block they update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Regime {
    /// One task alone, in its own group's block.
    Independent { task: TaskId },
    /// All tasks of one group, in that group's block.
    Homogeneous { group: TaskGroup },
    /// All six tasks through the linguistic-centric block.
    Heterogeneous,
}

impl Regime {
    pub fn tasks(self) -> Vec<TaskId> {
        match self {
            Regime::Independent { task } => vec![task],
            Regime::Homogeneous { group } => group.tasks().to_vec(),
            Regime::Heterogeneous => TaskId::ALL.to_vec(),
        }
    }

    pub fn target_group(self) -> TaskGroup {
        match self {
            Regime::Independent { task } => task.group(),
            Regime::Homogeneous { group } => group,
            Regime::Heterogeneous => TaskGroup::Lc,
        }
    }

    pub fn role(self) -> BlockRole {
        match self {
            Regime::Independent { task } => BlockRole::Independent { task },
            Regime::Homogeneous { .. } => BlockRole::Homogeneous,
            Regime::Heterogeneous => BlockRole::Heterogeneous,
        }
    }

    /// Short name used for run directories: `ind-a`, `homo-pc`, `hete`.
    pub fn slug(self) -> String {
        match self {
            Regime::Independent { task } => format!("ind-{task}"),
            Regime::Homogeneous { group } => format!("homo-{}", group.as_str()),
            Regime::Heterogeneous => "hete".into(),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "hete" || s == "heterogeneous" {
            return Ok(Regime::Heterogeneous);
        }
        if let Some(g) = s.strip_prefix("homo-") {
            return g.parse().map(|group| Regime::Homogeneous { group }).map_err(|e| format!("{e}"));
        }
        if let Some(t) = s.strip_prefix("ind-") {
            return t.parse().map(|task| Regime::Independent { task }).map_err(|e| format!("{e}"));
        }
        Err(format!("unknown regime `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Relative weight of each task in the loss; missing tasks weigh 1.
    pub task_sampling_weights: BTreeMap<TaskId, f64>,
    /// Score only answer tokens. When false the prompt tokens after the first are scored too.
    pub answer_only: bool,
    /// Chance per video and epoch of training on a randomly cropped copy; 0 disables.
    pub crop_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: 1.0,
            seed: 11,
            task_sampling_weights: BTreeMap::new(),
            answer_only: true,
            crop_probability: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batchSize must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learningRate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.crop_probability) {
            return bad(format!("cropProbability must lie in [0, 1], got {}", self.crop_probability));
        }
        if let Some((t, w)) = self.task_sampling_weights.iter().find(|(_, w)| !(**w > 0.0)) {
            return bad(format!("weight for task {t} must be positive, got {w}"));
        }
        Ok(())
    }

    pub fn weight(&self, task: TaskId) -> f64 {
        self.task_sampling_weights.get(&task).copied().unwrap_or(1.0)
    }
}

/// Tokenized example with its pooled video features.
#[derive(Debug, Clone)]
pub struct Example {
    pub video_id: String,
    pub task: TaskId,
    pub video: usize,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Tokenized QA pairs of a dataset restricted to some tasks, with encoded videos.
#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub videos: Vec<VideoTokens>,
    pub examples: Vec<Example>,
}

impl ExampleSet {
    pub fn build(
        model: &CrashChat,
        tokenizer: &Tokenizer,
        data: &Dataset,
        tasks: &[TaskId],
        answer_only: bool,
    ) -> Result<Self, TrainError> {
        let qa = build_qa_pairs(&data.samples, &data.texts)?;
        let mut videos = Vec::with_capacity(data.samples.len());
        let mut index = BTreeMap::new();
        for s in &data.samples {
            index.insert(s.video_id().to_string(), videos.len());
            videos.push(model.encode_video(s)?);
        }
        let examples = qa
            .into_iter()
            .filter(|q| tasks.contains(&q.task))
            .map(|q| {
                let mut prompt = tokenizer.encode(&q.question);
                let mut answer = tokenizer.encode(&q.reference_answer);
                answer.push(EOS_ID);
                if !answer_only && prompt.len() > 1 {
                    let mut rest = prompt.split_off(1);
                    rest.append(&mut answer);
                    answer = rest;
                }
                Example { video: index[&q.video_id], video_id: q.video_id, task: q.task, prompt, answer }
            })
            .collect();
        Ok(Self { videos, examples })
    }

    fn sft<'a>(&'a self, ex: &'a Example) -> SftExample<'a> {
        SftExample { video: &self.videos[ex.video], prompt: &ex.prompt, answer: &ex.answer }
    }
}

/// Drops `front` frames from the start and `back` from the end, shifting the
/// annotation so the crash keeps its place relative to the remaining frames.
pub fn crop_sample(sample: &VideoSample, front: usize, back: usize) -> Result<VideoSample, TrainError> {
    let frames = sample.frames();
    let n = frames.len();
    if front + back >= n {
        return Err(TrainError::Config(format!("cannot crop {front}+{back} of {n} frames")));
    }
    let dim = frames.dim();
    let data = frames.as_slice()[front * dim..(n - back) * dim].to_vec();
    let fps = sample.fps();
    let shift = front as f64 / fps;
    let duration = (n - front - back) as f64 / fps;
    let annotation = sample
        .annotation()
        .map(|a| {
            let t = |x: f64| round_tenth(x - shift).max(0.0);
            TemporalAnnotation::with_tolerance(
                t(a.pre_crash_start()),
                t(a.crash_start()),
                t(a.crash_end()).min(duration),
                duration,
                a.tolerance(),
            )
        })
        .transpose()?;
    let frames = Frames::new(dim, data)?;
    Ok(VideoSample::new(sample.video_id(), frames, fps, annotation, sample.source())?)
}

/// A copy of `data` where each video is, with probability `p`, cropped by a
/// random number of whole pooling windows at either end. Positives keep their
/// full pre-crash and crash phases; negatives keep at least half their frames.
fn crop_dataset(data: &Dataset, p: f64, stride: usize, rng: &mut ChaCha8Rng) -> Result<Dataset, TrainError> {
    let mut out = Dataset { samples: Vec::with_capacity(data.samples.len()), texts: data.texts.clone() };
    for s in &data.samples {
        if !rng.random_bool(p) {
            out.samples.push(s.clone());
            continue;
        }
        let n = s.frames().len();
        let (max_front, max_back) = match s.annotation() {
            Some(a) => {
                let first = phase_frame(a.pre_crash_start(), s.fps());
                let last = (a.crash_end() * s.fps() - 1e-9).ceil().max(0.0) as usize;
                (first / stride, n.saturating_sub(last) / stride)
            }
            None => (n / 2 / stride, n / 2 / stride),
        };
        let front = rng.random_range(0..=max_front) * stride;
        let back = rng.random_range(0..=max_back) * stride;
        if front + back >= n {
            out.samples.push(s.clone());
            continue;
        }
        out.samples.push(crop_sample(s, front, back)?);
    }
    Ok(out)
}

/// Adam moments for one adapter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One optimizer step on `batch`. Returns the batch's answer-token mean NLL,
/// computed before the update.
pub fn sft_step(
    model: &CrashChat,
    set: &mut AdapterSet,
    data: &ExampleSet,
    batch: &[&Example],
    cfg: &TrainConfig,
    adam: &mut AdamState,
) -> Result<f64, TrainError> {
    let denom: f64 = batch.iter().map(|e| cfg.weight(e.task) * e.answer.len() as f64).sum();
    let mut grad = set.zeros_like();
    let mut loss = 0.0;
    for ex in batch {
        let w = cfg.weight(ex.task) / denom;
        let (nll, _) = model.sft_loss(set, &data.sft(ex), w, Some(&mut grad))?;
        loss += w * nll;
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, batch: 0, tasks: tasks_of(batch), value: loss });
    }
    let mut g = grad.to_flat();
    if cfg.grad_clip > 0.0 {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            g.iter_mut().for_each(|x| *x *= k);
        }
    }
    let mut p = set.to_flat();
    adam.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(adam.t);
    let bc2 = 1.0 - cfg.beta2.powi(adam.t);
    for i in 0..p.len() {
        adam.m[i] = cfg.beta1 * adam.m[i] + (1.0 - cfg.beta1) * g[i];
        adam.v[i] = cfg.beta2 * adam.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = adam.m[i] / bc1;
        let vh = adam.v[i] / bc2;
        p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
    }
    set.assign_flat(&p)?;
    Ok(loss)
}

fn tasks_of(batch: &[&Example]) -> String {
    let mut t: Vec<char> = batch.iter().map(|e| e.task.letter()).collect();
    t.sort_unstable();
    t.dedup();
    t.into_iter().collect()
}

/// Per-task mean answer-token NLL over a whole example set.
pub fn evaluate_loss(
    model: &CrashChat,
    set: &AdapterSet,
    data: &ExampleSet,
) -> Result<BTreeMap<TaskId, f64>, TrainError> {
    let mut acc: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
    for ex in &data.examples {
        let (nll, n) = model.sft_loss(set, &data.sft(ex), 1.0, None)?;
        let e = acc.entry(ex.task).or_default();
        e.0 += nll;
        e.1 += n;
    }
    Ok(acc.into_iter().map(|(t, (s, n))| (t, s / n.max(1) as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub task: TaskId,
    pub split: String,
    pub loss: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,task,split,loss")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.epoch, r.task, r.split, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model whose target block holds the selected parameters.
    pub checkpoint: Checkpoint,
    /// Epoch of the selected parameters; 0 means none improved on the initial block.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Per-task losses; epoch 0 is the untrained block.
    pub log: Vec<LogRow>,
}

fn selection_loss(losses: &BTreeMap<TaskId, f64>, cfg: &TrainConfig) -> f64 {
    let wsum: f64 = losses.keys().map(|t| cfg.weight(*t)).sum();
    losses.iter().map(|(t, l)| cfg.weight(*t) * l).sum::<f64>() / wsum
}

/// Trains the regime's target block starting from `init`, keeping the epoch
/// with the lowest validation loss over the regime's tasks.
pub fn train_regime(
    init: &Checkpoint,
    regime: Regime,
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model = &init.model;
    let tasks = regime.tasks();
    let group = regime.target_group();
    let train_set = ExampleSet::build(model, tokenizer, train, &tasks, cfg.answer_only)?;
    let val_set = ExampleSet::build(model, tokenizer, val, &tasks, cfg.answer_only)?;
    let letters: String = tasks.iter().map(|t| t.letter()).collect();
    if train_set.examples.is_empty() {
        return Err(TrainError::EmptyTaskSubset(letters));
    }
    for t in &tasks {
        if !train_set.examples.iter().any(|e| e.task == *t) {
            return Err(TrainError::EmptyTaskSubset(t.letter().to_string()));
        }
    }
    let mut set = model.adapter(group).clone();
    let mut adam = AdamState::new(set.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let push = |log: &mut Vec<LogRow>, epoch, split: &str, losses: &BTreeMap<TaskId, f64>| {
        for (t, l) in losses {
            log.push(LogRow { epoch, task: *t, split: split.into(), loss: *l });
        }
    };

    let val_of = |set: &AdapterSet| -> Result<(BTreeMap<TaskId, f64>, f64), TrainError> {
        if val_set.examples.is_empty() {
            return Ok((BTreeMap::new(), f64::NAN));
        }
        let l = evaluate_loss(model, set, &val_set)?;
        let s = selection_loss(&l, cfg);
        Ok((l, s))
    };
    let (l0, s0) = val_of(&set)?;
    push(&mut log, 0, "val", &l0);
    let (mut best, mut best_epoch, mut best_loss) = (set.clone(), 0, s0);

    let mut train_set = train_set;
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FF_EE00);
    for epoch in 1..=cfg.epochs {
        if cfg.crop_probability > 0.0 {
            let cropped = crop_dataset(train, cfg.crop_probability, model.config().pool_stride, &mut crop_rng)?;
            train_set = ExampleSet::build(model, tokenizer, &cropped, &tasks, cfg.answer_only)?;
        }
        let mut order: Vec<usize> = (0..train_set.examples.len()).collect();
        order.shuffle(&mut rng);
        let mut acc: BTreeMap<TaskId, (f64, f64)> = BTreeMap::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let loss = sft_step(model, &mut set, &train_set, &batch, cfg, &mut adam).map_err(|e| match e {
                TrainError::NonFinite { tasks, value, .. } => TrainError::NonFinite { epoch, batch: bi, tasks, value },
                other => other,
            })?;
            // Attribute the batch loss to its tasks by answer-token share for the log.
            let n: f64 = batch.iter().map(|e| e.answer.len() as f64).sum();
            for e in &batch {
                let a = acc.entry(e.task).or_default();
                a.0 += loss * e.answer.len() as f64 / n;
                a.1 += e.answer.len() as f64 / n;
            }
        }
        let train_losses: BTreeMap<TaskId, f64> = acc.into_iter().map(|(t, (s, n))| (t, s / n)).collect();
        push(&mut log, epoch, "train", &train_losses);
        let (l, s) = val_of(&set)?;
        push(&mut log, epoch, "val", &l);
        log::info!("{regime} epoch {epoch}: val loss {s:.4}");
        // Without validation data the last epoch is kept.
        if s.is_nan() || s < best_loss || best_loss.is_nan() {
            best = set.clone();
            best_epoch = epoch;
            best_loss = s;
        }
    }

    let mut out = init.clone();
    out.model.set_adapter(best)?;
    out.meta.set_role(group, regime.role());
    Ok(TrainOutcome { checkpoint: out, best_epoch, best_val_loss: best_loss, log })
}

/// Combines the linguistic-centric block of the heterogeneous run with the
/// perception-centric block of the homogeneous perception run.
pub fn assemble_crashchat(hetero: &Checkpoint, homo_pc: &Checkpoint) -> Result<Checkpoint, TrainError> {
    if hetero.meta.lc_role != BlockRole::Heterogeneous {
        return Err(TrainError::Role(format!(
            "first checkpoint must hold a heterogeneous Lc block, found {:?}",
            hetero.meta.lc_role
        )));
    }
    if homo_pc.meta.pc_role != BlockRole::Homogeneous {
        return Err(TrainError::Role(format!(
            "second checkpoint must hold a homogeneous Pc block, found {:?}",
            homo_pc.meta.pc_role
        )));
    }
    if hetero.meta.backbone != homo_pc.meta.backbone || hetero.model.base() != homo_pc.model.base() {
        return Err(TrainError::Role("checkpoints do not share the same base model".into()));
    }
    let mut out = hetero.clone();
    out.model.set_adapter(homo_pc.model.adapter(TaskGroup::Pc).clone())?;
    out.meta.pc_role = BlockRole::Homogeneous;
    Ok(out)
}
