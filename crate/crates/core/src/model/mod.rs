//! Toy-scale dual-adapter video-language model.
//!
//! A frozen vision encoder turns frames into video tokens, a per-group
//! projector lifts them into the language embedding space, they are prefixed to
//! the embedded prompt, and a frozen causal transformer adapted by the group's
//! low-rank factors predicts the answer.

mod checkpoint;
mod config;
mod transformer;
mod weights;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

pub use checkpoint::{BlockRole, Checkpoint, CheckpointMeta};
pub use config::{AttnProj, BackboneConfig};
pub use weights::{AdapterSet, BaseLayer, BaseWeights, LoraAdapter, LoraPair, Projector};

use crate::schema::{TaskGroup, VideoSample};
use crate::tokenizer::{Tokenizer, EOS_ID};
use transformer::{projector_backward, KvCache, Transformer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no adapter loaded for group {0}")]
    MissingAdapter(TaskGroup),
    #[error("sequence too long: {0}")]
    SequenceTooLong(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Encoded video, one row per pooled token (`d_v` columns).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens(pub Array2<f64>);

impl VideoTokens {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Token ids and their embeddings (`d_l` columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
    pub embeddings: Array2<f64>,
}

/// The multimodal sequence: projected video rows followed by text rows.
/// Row `i` takes position encoding `i` when run through the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub embeddings: Array2<f64>,
    pub n_video: usize,
    pub n_text: usize,
    /// Video tokens dropped from the front to respect `max_seq_len`.
    pub dropped_video: usize,
}

impl Assembled {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodingConfig {
    pub max_new_tokens: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self { max_new_tokens: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<usize>,
    /// The length cap (or sequence limit) was reached before `<eos>`.
    pub truncated: bool,
}

/// One supervised example in token form. `answer` normally ends with `<eos>`.
#[derive(Debug, Clone)]
pub struct SftExample<'a> {
    pub video: &'a VideoTokens,
    pub prompt: &'a [usize],
    pub answer: &'a [usize],
}

/// The full model: frozen base plus one adapter block per task group.
#[derive(Debug, Clone, PartialEq)]
pub struct CrashChat {
    config: BackboneConfig,
    tokenizer_len: usize,
    base: BaseWeights,
    lc: AdapterSet,
    pc: AdapterSet,
}

impl CrashChat {
    /// Fresh model: deterministic base and initial adapters from `config.seed`.
    pub fn new(config: BackboneConfig) -> Result<Self, ModelError> {
        let tok = Tokenizer::from_templates();
        if config.vocab_size != tok.len() {
            return Err(ModelError::Config(format!(
                "vocabSize {} does not match tokenizer vocabulary {}",
                config.vocab_size,
                tok.len()
            )));
        }
        let base = BaseWeights::init(&config)?;
        let (lc, pc) = AdapterSet::init_pair(&config)?;
        Ok(Self { tokenizer_len: tok.len(), config, base, lc, pc })
    }

    pub(crate) fn from_parts(
        config: BackboneConfig,
        base: BaseWeights,
        lc: AdapterSet,
        pc: AdapterSet,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { tokenizer_len: config.vocab_size, config, base, lc, pc })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    pub fn adapter(&self, group: TaskGroup) -> &AdapterSet {
        match group {
            TaskGroup::Lc => &self.lc,
            TaskGroup::Pc => &self.pc,
        }
    }

    /// Replaces one group's block. The base stays untouched.
    pub fn set_adapter(&mut self, set: AdapterSet) -> Result<(), ModelError> {
        let current = self.adapter(set.group);
        if current.num_params() != set.num_params() {
            return Err(ModelError::Shape(format!(
                "adapter for {} has {} parameters, expected {}",
                set.group,
                set.num_params(),
                current.num_params()
            )));
        }
        match set.group {
            TaskGroup::Lc => self.lc = set,
            TaskGroup::Pc => self.pc = set,
        }
        Ok(())
    }

    fn tf(&self) -> Transformer<'_> {
        Transformer::new(&self.config, &self.base)
    }

    /// Frozen vision encoder: `tanh(W·frame + b)` per frame, then mean pooling
    /// over non-overlapping windows of `pool_stride` frames.
    pub fn encode_video(&self, video: &VideoSample) -> Result<VideoTokens, ModelError> {
        let frames = video.frames();
        if frames.dim() != self.config.frame_dim {
            return Err(ModelError::Shape(format!(
                "video {} has feature dim {}, encoder expects {}",
                video.video_id(),
                frames.dim(),
                self.config.frame_dim
            )));
        }
        let n = frames.len();
        let raw =
            Array2::from_shape_vec((n, frames.dim()), frames.as_slice().to_vec()).expect("frame buffer is rectangular");
        let per_frame = (raw.dot(&self.base.enc_w.t()) + &self.base.enc_b).mapv(f64::tanh);
        let stride = self.config.pool_stride;
        let n_tok = n.div_ceil(stride);
        let mut tokens = Array2::zeros((n_tok, self.config.d_v));
        for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
            let window = per_frame.slice(s![i * stride..((i + 1) * stride).min(n), ..]);
            row.assign(&window.mean_axis(Axis(0)).expect("non-empty window"));
        }
        Ok(VideoTokens(tokens))
    }

    pub fn embed_text(&self, text: &str, tokenizer: &Tokenizer) -> TextTokens {
        self.embed_ids(tokenizer.encode(text))
    }

    pub fn embed_ids(&self, ids: Vec<usize>) -> TextTokens {
        let embeddings = self.tf().embed_tokens(&ids);
        TextTokens { ids, embeddings }
    }

    /// Maps video tokens into the language space with the group's projector.
    pub fn project(&self, tokens: &VideoTokens, group: TaskGroup) -> Result<Array2<f64>, ModelError> {
        self.project_with(tokens, self.adapter(group))
    }

    pub fn project_with(&self, tokens: &VideoTokens, set: &AdapterSet) -> Result<Array2<f64>, ModelError> {
        if tokens.0.ncols() != self.config.d_v {
            return Err(ModelError::Shape(format!(
                "video tokens have dim {}, projector expects {}",
                tokens.0.ncols(),
                self.config.d_v
            )));
        }
        Ok(set.projector.apply(&tokens.0))
    }

    /// `[projected video ; text]`, dropping video tokens from the front when the
    /// total exceeds `max_seq_len`. Text is never truncated.
    pub fn assemble(&self, projected: &Array2<f64>, text: &Array2<f64>) -> Result<Assembled, ModelError> {
        let d = self.config.d_l;
        if projected.ncols() != d || text.ncols() != d {
            return Err(ModelError::Shape(format!(
                "assemble expects width {d}, got {} and {}",
                projected.ncols(),
                text.ncols()
            )));
        }
        let max = self.config.max_seq_len;
        let n_text = text.nrows();
        if n_text > max {
            return Err(ModelError::SequenceTooLong(format!("{n_text} text tokens exceed maxSeqLen {max}")));
        }
        let keep = projected.nrows().min(max - n_text);
        let dropped = projected.nrows() - keep;
        if dropped > 0 {
            log::warn!("dropping {dropped} leading video tokens to fit maxSeqLen {max}");
        }
        let video = projected.slice(s![dropped.., ..]);
        let embeddings = ndarray::concatenate(Axis(0), &[video, text.view()]).expect("same width");
        Ok(Assembled { embeddings, n_video: keep, n_text, dropped_video: dropped })
    }

    /// Next-token distributions for every position of `z`, running the backbone
    /// with `lora` (or the bare frozen backbone when `None`).
    pub fn forward_adapted(&self, z: &Assembled, lora: Option<&LoraAdapter>) -> Result<Array2<f64>, ModelError> {
        self.check_lora(lora)?;
        let tf = self.tf();
        let x0 = tf.with_positions(z.embeddings.clone(), 0);
        let trace = tf.forward_train(x0, lora);
        let mut logits = tf.logits(trace.output());
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(logits)
    }

    fn check_lora(&self, lora: Option<&LoraAdapter>) -> Result<(), ModelError> {
        let Some(lora) = lora else { return Ok(()) };
        if lora.layers.len() != self.config.layers {
            return Err(ModelError::Shape(format!(
                "adapter has {} layers, backbone has {}",
                lora.layers.len(),
                self.config.layers
            )));
        }
        let d = self.config.d_l;
        for (l, p, pair) in lora.pairs() {
            let r = pair.a.nrows();
            if pair.a.ncols() != d || pair.b.dim() != (d, r) || r == 0 {
                return Err(ModelError::Shape(format!(
                    "layer {l} {p:?}: A {:?}, B {:?} inconsistent with dL={d}",
                    pair.a.dim(),
                    pair.b.dim()
                )));
            }
        }
        Ok(())
    }

    /// Greedy decoding from an assembled prefix.
    pub fn generate(
        &self,
        z: &Assembled,
        lora: Option<&LoraAdapter>,
        decoding: DecodingConfig,
        tokenizer: &Tokenizer,
    ) -> Result<Generation, ModelError> {
        self.check_lora(lora)?;
        if decoding.max_new_tokens == 0 {
            return Ok(Generation { text: String::new(), ids: Vec::new(), truncated: true });
        }
        let tf = self.tf();
        let mut cache = KvCache::new(&self.config);
        let x0 = tf.with_positions(z.embeddings.clone(), 0);
        let mut x_last = tf.forward_cached(x0, lora, &mut cache);
        let mut ids = Vec::new();
        let mut truncated = true;
        loop {
            let last = x_last.slice(s![x_last.nrows() - 1.., ..]).to_owned();
            let logits = tf.logits(&last);
            let next = argmax(logits.row(0).iter().copied());
            if next == EOS_ID {
                truncated = false;
                break;
            }
            ids.push(next);
            if ids.len() >= decoding.max_new_tokens || cache.len() >= self.config.max_seq_len {
                break;
            }
            let emb = tf.embed_tokens(&[next]);
            x_last = tf.forward_cached(tf.with_positions(emb, cache.len()), lora, &mut cache);
        }
        Ok(Generation { text: tokenizer.decode(&ids), ids, truncated })
    }

    /// Builds the assembled prefix for a prompt under one adapter block.
    pub fn prefix(&self, video: &VideoTokens, set: &AdapterSet, prompt: &[usize]) -> Result<Assembled, ModelError> {
        let projected = self.project_with(video, set)?;
        let text = self.tf().embed_tokens(prompt);
        self.assemble(&projected, &text)
    }

    /// Answer-only next-token NLL of one example under `set`. Returns the summed
    /// NLL and the number of scored tokens; when `grad` is given, accumulates the
    /// gradient of `weight · NLL` w.r.t. the projector and adapter parameters.
    pub fn sft_loss(
        &self,
        set: &AdapterSet,
        ex: &SftExample<'_>,
        weight: f64,
        grad: Option<&mut AdapterSet>,
    ) -> Result<(f64, usize), ModelError> {
        if ex.answer.is_empty() {
            return Ok((0.0, 0));
        }
        let mut text_ids = ex.prompt.to_vec();
        text_ids.extend_from_slice(ex.answer);
        let tf = self.tf();
        let projected = self.project_with(ex.video, set)?;
        let z = self.assemble(&projected, &tf.embed_tokens(&text_ids))?;
        // The prompt must be non-empty so that the first answer token has a predecessor.
        let first_answer = z.n_video + ex.prompt.len();
        if first_answer == 0 {
            return Err(ModelError::Shape("example has neither video nor prompt tokens".into()));
        }
        let targets: Vec<(usize, usize)> =
            ex.answer.iter().enumerate().map(|(k, &id)| (first_answer + k - 1, id)).collect();
        let x0 = tf.with_positions(z.embeddings, 0);
        let trace = tf.forward_train(x0, Some(&set.lora));
        let (nll, g_out) = tf.nll(trace.output(), &targets, weight);
        if let Some(grad) = grad {
            let g_in = tf.backward(&trace, g_out, Some(&set.lora), Some(&mut grad.lora));
            let kept = ex.video.0.slice(s![z.dropped_video.., ..]);
            projector_backward(g_in.slice(s![..z.n_video, ..]), kept, grad);
        }
        Ok((nll, targets.len()))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer_len
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
