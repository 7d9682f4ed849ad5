//! Frozen base weights and the trainable per-group adapter blocks.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{AttnProj, BackboneConfig};
use super::ModelError;
use crate::schema::TaskGroup;

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Sinusoidal position table, scaled so every row has unit norm.
fn sinusoidal(max_len: usize, d: usize) -> Array2<f64> {
    let scale = (2.0 / d as f64).sqrt();
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer {
    pub(crate) attn: [Array2<f64>; 4],
    pub(crate) w1: Array2<f64>,
    pub(crate) b1: Array1<f64>,
    pub(crate) w2: Array2<f64>,
    pub(crate) b2: Array1<f64>,
}

impl BaseLayer {
    pub fn attn(&self, proj: AttnProj) -> &Array2<f64> {
        &self.attn[proj.index()]
    }
}

/// Vision encoder, embeddings and transformer blocks. Never updated by training;
/// no method hands out mutable access to an existing instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub(crate) enc_w: Array2<f64>,
    pub(crate) enc_b: Array1<f64>,
    pub(crate) tok_emb: Array2<f64>,
    pub(crate) pos_emb: Array2<f64>,
    pub(crate) layers: Vec<BaseLayer>,
}

impl BaseWeights {
    pub fn init(cfg: &BackboneConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_l;
        let enc_w = gaussian(&mut rng, cfg.d_v, cfg.frame_dim, (1.0 / cfg.frame_dim as f64).sqrt());
        let enc_b = Array1::zeros(cfg.d_v);
        let tok_emb = gaussian(&mut rng, cfg.vocab_size, d, (1.0 / d as f64).sqrt());
        let pos_emb = sinusoidal(cfg.max_seq_len, d);
        let attn_std = (1.0 / d as f64).sqrt();
        let out_std = attn_std / (2.0 * cfg.layers as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| BaseLayer {
                attn: [
                    gaussian(&mut rng, d, d, attn_std),
                    gaussian(&mut rng, d, d, attn_std),
                    gaussian(&mut rng, d, d, attn_std),
                    gaussian(&mut rng, d, d, out_std),
                ],
                w1: gaussian(&mut rng, cfg.mlp_hidden, d, attn_std),
                b1: Array1::zeros(cfg.mlp_hidden),
                w2: gaussian(
                    &mut rng,
                    d,
                    cfg.mlp_hidden,
                    (1.0 / cfg.mlp_hidden as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt(),
                ),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self { enc_w, enc_b, tok_emb, pos_emb, layers })
    }

    pub fn layers(&self) -> &[BaseLayer] {
        &self.layers
    }

    pub fn token_embeddings(&self) -> &Array2<f64> {
        &self.tok_emb
    }

    /// A copy of these weights with `delta` added to one dense attention projection.
    pub fn with_delta(&self, layer: usize, proj: AttnProj, delta: &Array2<f64>) -> Result<Self, ModelError> {
        let mut out = self.clone();
        let w = out
            .layers
            .get_mut(layer)
            .ok_or_else(|| ModelError::Shape(format!("layer {layer} out of range")))?
            .attn
            .get_mut(proj.index())
            .expect("four projections");
        if w.dim() != delta.dim() {
            return Err(ModelError::Shape(format!("delta {:?} vs weight {:?}", delta.dim(), w.dim())));
        }
        *w += delta;
        Ok(out)
    }

    /// Folds an adapter's low-rank updates into dense weights.
    pub fn merged(&self, lora: &LoraAdapter) -> Result<Self, ModelError> {
        let mut out = self.clone();
        for (l, slots) in lora.layers.iter().enumerate() {
            for proj in AttnProj::ALL {
                if let Some(pair) = &slots[proj.index()] {
                    let w = &mut out.layers[l].attn[proj.index()];
                    *w += &pair.b.dot(&pair.a);
                }
            }
        }
        Ok(out)
    }

    /// Every tensor in a fixed order, used for checkpointing and hashing.
    pub(crate) fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("enc.w".into(), self.enc_w.shape().to_vec(), self.enc_w.as_slice().unwrap()),
            ("enc.b".into(), self.enc_b.shape().to_vec(), self.enc_b.as_slice().unwrap()),
            ("tok_emb".into(), self.tok_emb.shape().to_vec(), self.tok_emb.as_slice().unwrap()),
            ("pos_emb".into(), self.pos_emb.shape().to_vec(), self.pos_emb.as_slice().unwrap()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for p in AttnProj::ALL {
                let w = &l.attn[p.index()];
                out.push((format!("layer{i}.{p:?}"), w.shape().to_vec(), w.as_slice().unwrap()));
            }
            out.push((format!("layer{i}.w1"), l.w1.shape().to_vec(), l.w1.as_slice().unwrap()));
            out.push((format!("layer{i}.b1"), l.b1.shape().to_vec(), l.b1.as_slice().unwrap()));
            out.push((format!("layer{i}.w2"), l.w2.shape().to_vec(), l.w2.as_slice().unwrap()));
            out.push((format!("layer{i}.b2"), l.b2.shape().to_vec(), l.b2.as_slice().unwrap()));
        }
        out
    }

    pub(crate) fn from_tensors(cfg: &BackboneConfig, mut t: TensorReader) -> Result<Self, ModelError> {
        let d = cfg.d_l;
        let enc_w = t.mat("enc.w", cfg.d_v, cfg.frame_dim)?;
        let enc_b = t.vec("enc.b", cfg.d_v)?;
        let tok_emb = t.mat("tok_emb", cfg.vocab_size, d)?;
        let pos_emb = t.mat("pos_emb", cfg.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let attn = [
                t.mat(&format!("layer{i}.Q"), d, d)?,
                t.mat(&format!("layer{i}.K"), d, d)?,
                t.mat(&format!("layer{i}.V"), d, d)?,
                t.mat(&format!("layer{i}.O"), d, d)?,
            ];
            layers.push(BaseLayer {
                attn,
                w1: t.mat(&format!("layer{i}.w1"), cfg.mlp_hidden, d)?,
                b1: t.vec(&format!("layer{i}.b1"), cfg.mlp_hidden)?,
                w2: t.mat(&format!("layer{i}.w2"), d, cfg.mlp_hidden)?,
                b2: t.vec(&format!("layer{i}.b2"), d)?,
            });
        }
        t.finish()?;
        Ok(Self { enc_w, enc_b, tok_emb, pos_emb, layers })
    }
}

/// Affine map from video-token space (`d_v`) into language-embedding space (`d_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Projector {
    pub fn zeros(d_v: usize, d_l: usize) -> Self {
        Self { w: Array2::zeros((d_l, d_v)), b: Array1::zeros(d_l) }
    }

    pub fn apply(&self, tokens: &Array2<f64>) -> Array2<f64> {
        tokens.dot(&self.w.t()) + &self.b
    }
}

/// Low-rank factors for one adapted weight: the update is `B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `r × d_in`
    pub a: Array2<f64>,
    /// `d_out × r`
    pub b: Array2<f64>,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a)
    }
}

/// Per-layer low-rank factors, indexed by [`AttnProj`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layers: Vec<[Option<LoraPair>; 4]>,
}

impl LoraAdapter {
    pub fn pair(&self, layer: usize, proj: AttnProj) -> Option<&LoraPair> {
        self.layers.get(layer).and_then(|s| s[proj.index()].as_ref())
    }

    pub fn pair_mut(&mut self, layer: usize, proj: AttnProj) -> Option<&mut LoraPair> {
        self.layers.get_mut(layer).and_then(|s| s[proj.index()].as_mut())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, AttnProj, &LoraPair)> {
        self.layers.iter().enumerate().flat_map(|(l, slots)| {
            AttnProj::ALL.into_iter().filter_map(move |p| slots[p.index()].as_ref().map(|x| (l, p, x)))
        })
    }

    /// An adapter with no attached pairs; behaves exactly like the frozen base.
    pub fn empty(layers: usize) -> Self {
        Self { layers: (0..layers).map(|_| [None, None, None, None]).collect() }
    }

    /// Sets every `B` to zero, making the adapter an exact identity.
    pub fn zero_b(&mut self) {
        for slots in &mut self.layers {
            for p in slots.iter_mut().flatten() {
                p.b.fill(0.0);
            }
        }
    }
}

/// Projector plus low-rank adapter for one task group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub group: TaskGroup,
    pub projector: Projector,
    pub lora: LoraAdapter,
}

impl AdapterSet {
    /// Initial blocks for both groups. The two projectors come from one random
    /// draw and start identical; each group's `A` matrices get their own draw and
    /// every `B` starts at zero.
    pub fn init_pair(cfg: &BackboneConfig) -> Result<(AdapterSet, AdapterSet), ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        let proj_std = 1.0 / cfg.d_v as f64;
        let projector = Projector { w: gaussian(&mut rng, cfg.d_l, cfg.d_v, proj_std), b: Array1::zeros(cfg.d_l) };
        let mut make = |group| {
            let layers = (0..cfg.layers)
                .map(|l| {
                    AttnProj::ALL.map(|p| {
                        cfg.is_adapted(l, p).then(|| LoraPair {
                            a: gaussian(&mut rng, cfg.rank, cfg.d_l, cfg.lora_init_std),
                            b: Array2::zeros((cfg.d_l, cfg.rank)),
                        })
                    })
                })
                .collect();
            AdapterSet { group, projector: projector.clone(), lora: LoraAdapter { layers } }
        };
        let lc = make(TaskGroup::Lc);
        let pc = make(TaskGroup::Pc);
        Ok((lc, pc))
    }

    /// Same shapes, all zeros. Used for gradient and optimizer-moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|x| x.fill(0.0));
        out
    }

    pub fn for_each(&self, mut f: impl FnMut(&[f64])) {
        f(self.projector.w.as_slice().unwrap());
        f(self.projector.b.as_slice().unwrap());
        for slots in &self.lora.layers {
            for p in slots.iter().flatten() {
                f(p.a.as_slice().unwrap());
                f(p.b.as_slice().unwrap());
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.projector.w.as_slice_mut().unwrap());
        f(self.projector.b.as_slice_mut().unwrap());
        for slots in &mut self.lora.layers {
            for p in slots.iter_mut().flatten() {
                f(p.a.as_slice_mut().unwrap());
                f(p.b.as_slice_mut().unwrap());
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|x| n += x.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|x| out.extend_from_slice(x));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Shape(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        self.for_each_mut(|x| {
            let n = x.len();
            x.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &AdapterSet) {
        let flat = other.to_flat();
        let mut off = 0;
        self.for_each_mut(|x| {
            let n = x.len();
            for (xi, oi) in x.iter_mut().zip(&flat[off..off + n]) {
                *xi += alpha * oi;
            }
            off += n;
        });
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("proj.w".into(), self.projector.w.shape().to_vec(), self.projector.w.as_slice().unwrap()),
            ("proj.b".into(), self.projector.b.shape().to_vec(), self.projector.b.as_slice().unwrap()),
        ];
        for (l, p, pair) in self.lora.pairs() {
            out.push((format!("lora{l}.{p:?}.A"), pair.a.shape().to_vec(), pair.a.as_slice().unwrap()));
            out.push((format!("lora{l}.{p:?}.B"), pair.b.shape().to_vec(), pair.b.as_slice().unwrap()));
        }
        out
    }

    pub(crate) fn from_tensors(
        cfg: &BackboneConfig,
        group: TaskGroup,
        mut t: TensorReader,
    ) -> Result<Self, ModelError> {
        let projector = Projector { w: t.mat("proj.w", cfg.d_l, cfg.d_v)?, b: t.vec("proj.b", cfg.d_l)? };
        let mut lora = LoraAdapter::empty(cfg.layers);
        for l in 0..cfg.layers {
            for p in AttnProj::ALL {
                if cfg.is_adapted(l, p) {
                    let a = t.mat(&format!("lora{l}.{p:?}.A"), cfg.rank, cfg.d_l)?;
                    let b = t.mat(&format!("lora{l}.{p:?}.B"), cfg.d_l, cfg.rank)?;
                    lora.layers[l][p.index()] = Some(LoraPair { a, b });
                }
            }
        }
        t.finish()?;
        Ok(Self { group, projector, lora })
    }
}

/// Sequential reader over `(name, shape, data)` records, checking names and shapes.
pub(crate) struct TensorReader {
    records: std::vec::IntoIter<(String, Vec<usize>, Vec<f64>)>,
}

impl TensorReader {
    pub(crate) fn new(records: Vec<(String, Vec<usize>, Vec<f64>)>) -> Self {
        Self { records: records.into_iter() }
    }

    fn next(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>, ModelError> {
        let (n, s, data) =
            self.records.next().ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        if n != name || s != shape {
            return Err(ModelError::Checkpoint(format!("expected tensor {name} {shape:?}, found {n} {s:?}")));
        }
        Ok(data)
    }

    fn mat(&mut self, name: &str, r: usize, c: usize) -> Result<Array2<f64>, ModelError> {
        let data = self.next(name, &[r, c])?;
        Ok(Array2::from_shape_vec((r, c), data).expect("shape checked"))
    }

    fn vec(&mut self, name: &str, n: usize) -> Result<Array1<f64>, ModelError> {
        Ok(Array1::from_vec(self.next(name, &[n])?))
    }

    fn finish(mut self) -> Result<(), ModelError> {
        match self.records.next() {
            None => Ok(()),
            Some((n, _, _)) => Err(ModelError::Checkpoint(format!("unexpected extra tensor {n}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = BackboneConfig::default();
        assert_eq!(BaseWeights::init(&cfg).unwrap(), BaseWeights::init(&cfg).unwrap());
        let (a1, b1) = AdapterSet::init_pair(&cfg).unwrap();
        let (a2, b2) = AdapterSet::init_pair(&cfg).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn projectors_start_identical_and_b_is_zero() {
        let cfg = BackboneConfig::default();
        let (lc, pc) = AdapterSet::init_pair(&cfg).unwrap();
        assert_eq!(lc.projector, pc.projector);
        assert_ne!(lc.lora, pc.lora);
        for (_, _, p) in lc.lora.pairs() {
            assert!(p.b.iter().all(|&x| x == 0.0));
            assert_eq!(p.rank(), cfg.rank);
        }
        assert_eq!(lc.lora.pairs().count(), 16);
    }

    #[test]
    fn flat_round_trip() {
        let cfg = BackboneConfig::default();
        let (mut lc, _) = AdapterSet::init_pair(&cfg).unwrap();
        let mut flat = lc.to_flat();
        flat.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64);
        lc.assign_flat(&flat).unwrap();
        assert_eq!(lc.to_flat(), flat);
        assert!(lc.assign_flat(&flat[1..]).is_err());
    }

    #[test]
    fn merged_adds_low_rank_product() {
        let cfg = BackboneConfig::default();
        let base = BaseWeights::init(&cfg).unwrap();
        let (mut lc, _) = AdapterSet::init_pair(&cfg).unwrap();
        lc.lora.pair_mut(1, AttnProj::V).unwrap().b.fill(0.5);
        let merged = base.merged(&lc.lora).unwrap();
        let expect = base.layers[1].attn(AttnProj::V) + &lc.lora.pair(1, AttnProj::V).unwrap().delta();
        assert_eq!(merged.layers[1].attn(AttnProj::V), &expect);
        assert_eq!(merged.layers[0].attn(AttnProj::V), base.layers[0].attn(AttnProj::V));
    }
}
