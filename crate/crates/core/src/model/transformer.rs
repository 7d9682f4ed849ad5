//! Pre-norm causal transformer with optional low-rank adapters on the attention
//! projections, plus the hand-written backward pass for the trainable blocks.
//!
//! Convention: activations are row-major `(tokens × features)` and a weight `W`
//! of shape `(out × in)` is applied as `x·Wᵀ`. An adapted projection computes
//! `x·Wᵀ + (x·Aᵀ)·Bᵀ`, which equals `x·(W + B·A)ᵀ`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::config::{AttnProj, BackboneConfig};
use super::weights::{AdapterSet, BaseWeights, LoraAdapter, LoraPair};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) struct LnOut {
    y: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>) -> LnOut {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in y.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let k = *inv;
        row.mapv_inplace(|v| v * k);
    }
    LnOut { y, inv_std }
}

fn layer_norm_backward(gy: &Array2<f64>, ln: &LnOut) -> Array2<f64> {
    let d = gy.ncols() as f64;
    let mut gx = gy.clone();
    for ((mut g, y), &inv) in gx.rows_mut().into_iter().zip(ln.y.rows()).zip(ln.inv_std.iter()) {
        let mean_g = g.sum() / d;
        let mean_gy = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for (gi, yi) in g.iter_mut().zip(y.iter()) {
            *gi = inv * (*gi - mean_g - yi * mean_gy);
        }
    }
    gx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `x·Wᵀ (+ (x·Aᵀ)·Bᵀ)`; also returns `x·Aᵀ` for the backward pass.
fn linear(x: &Array2<f64>, w: &Array2<f64>, pair: Option<&LoraPair>) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(&w.t());
    let u = pair.map(|p| {
        let u = x.dot(&p.a.t());
        y += &u.dot(&p.b.t());
        u
    });
    (y, u)
}

fn linear_backward(
    gy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    pair: Option<&LoraPair>,
    u: Option<&Array2<f64>>,
    grad: Option<&mut LoraPair>,
) -> Array2<f64> {
    let mut gx = gy.dot(w);
    if let (Some(p), Some(u)) = (pair, u) {
        let gu = gy.dot(&p.b);
        if let Some(g) = grad {
            g.b += &gy.t().dot(u);
            g.a += &gu.t().dot(x);
        }
        gx += &gu.dot(&p.a);
    }
    gx
}

fn grad_pair<'g>(grad: &'g mut Option<&mut LoraAdapter>, layer: usize, proj: AttnProj) -> Option<&'g mut LoraPair> {
    grad.as_deref_mut().and_then(|a| a.pair_mut(layer, proj))
}

fn softmax_rows_causal(scores: &mut Array2<f64>, offset: usize) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = offset + i + 1;
        let max = row.slice(s![..visible]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

struct LayerTrace {
    x_in: Array2<f64>,
    ln1: LnOut,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    u: [Option<Array2<f64>>; 4],
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnOut,
    pre: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    x_out: Array2<f64>,
}

impl Trace {
    pub(crate) fn output(&self) -> &Array2<f64> {
        &self.x_out
    }
}

pub(crate) struct Transformer<'a> {
    pub cfg: &'a BackboneConfig,
    pub base: &'a BaseWeights,
}

impl<'a> Transformer<'a> {
    pub fn new(cfg: &'a BackboneConfig, base: &'a BaseWeights) -> Self {
        Self { cfg, base }
    }

    /// Adds position encodings to an assembled embedding sequence.
    pub fn with_positions(&self, mut z: Array2<f64>, offset: usize) -> Array2<f64> {
        let n = z.nrows();
        z += &self.base.pos_emb.slice(s![offset..offset + n, ..]);
        z
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Array2<f64> {
        let d = self.cfg.d_l;
        let mut out = Array2::zeros((ids.len(), d));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&self.base.tok_emb.row(id));
        }
        out
    }

    /// Full-sequence forward keeping activations for backprop.
    pub fn forward_train(&self, x0: Array2<f64>, lora: Option<&LoraAdapter>) -> Trace {
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = x0.nrows();
        let mut x = x0;
        let mut traces = Vec::with_capacity(self.base.layers.len());
        for (l, layer) in self.base.layers.iter().enumerate() {
            let pair = |p: AttnProj| lora.and_then(|a| a.pair(l, p));
            let ln1 = layer_norm(&x);
            let (q, uq) = linear(&ln1.y, &layer.attn[0], pair(AttnProj::Q));
            let (k, uk) = linear(&ln1.y, &layer.attn[1], pair(AttnProj::K));
            let (v, uv) = linear(&ln1.y, &layer.attn[2], pair(AttnProj::V));
            let mut attn = Array2::zeros((n, self.cfg.d_l));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                sc.mapv_inplace(|v| v * scale);
                softmax_rows_causal(&mut sc, 0);
                attn.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let (o, uo) = linear(&attn, &layer.attn[3], pair(AttnProj::O));
            let x_in = x.clone();
            x += &o;
            let ln2 = layer_norm(&x);
            let pre = ln2.y.dot(&layer.w1.t()) + &layer.b1;
            let act = pre.mapv(gelu);
            x += &(act.dot(&layer.w2.t()) + &layer.b2);
            traces.push(LayerTrace { x_in, ln1, q, k, v, u: [uq, uk, uv, uo], probs, attn, ln2, pre });
        }
        Trace { layers: traces, x_out: x }
    }

    /// Backpropagates `g_out` (gradient w.r.t. the final residual stream) and
    /// accumulates adapter gradients into `grad`. Returns the gradient w.r.t. the
    /// input embeddings.
    pub fn backward(
        &self,
        trace: &Trace,
        g_out: Array2<f64>,
        lora: Option<&LoraAdapter>,
        mut grad: Option<&mut LoraAdapter>,
    ) -> Array2<f64> {
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut g = g_out;
        for (l, (layer, t)) in self.base.layers.iter().zip(&trace.layers).enumerate().rev() {
            let pair = |p: AttnProj| lora.and_then(|a| a.pair(l, p));
            // MLP branch.
            let g_act = g.dot(&layer.w2);
            let mut g_pre = g_act;
            g_pre.zip_mut_with(&t.pre, |gp, &p| *gp *= gelu_grad(p));
            let g_h2 = g_pre.dot(&layer.w1);
            g += &layer_norm_backward(&g_h2, &t.ln2);
            // Attention branch.
            let g_attn = linear_backward(
                &g,
                &t.attn,
                &layer.attn[3],
                pair(AttnProj::O),
                t.u[3].as_ref(),
                grad_pair(&mut grad, l, AttnProj::O),
            );
            let n = g.nrows();
            let mut gq = Array2::zeros((n, self.cfg.d_l));
            let mut gk = Array2::zeros((n, self.cfg.d_l));
            let mut gv = Array2::zeros((n, self.cfg.d_l));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &t.probs[h];
                let g_o = g_attn.slice(cols);
                let mut g_p = g_o.dot(&t.v.slice(cols).t());
                gv.slice_mut(cols).assign(&p.t().dot(&g_o));
                for (mut gr, pr) in g_p.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = gr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    gr.zip_mut_with(&pr, |a, &b| *a = b * (*a - dot));
                }
                g_p.mapv_inplace(|v| v * scale);
                gq.slice_mut(cols).assign(&g_p.dot(&t.k.slice(cols)));
                gk.slice_mut(cols).assign(&g_p.t().dot(&t.q.slice(cols)));
            }
            let x1 = &t.ln1.y;
            let mut g_h1 = linear_backward(
                &gq,
                x1,
                &layer.attn[0],
                pair(AttnProj::Q),
                t.u[0].as_ref(),
                grad_pair(&mut grad, l, AttnProj::Q),
            );
            g_h1 += &linear_backward(
                &gk,
                x1,
                &layer.attn[1],
                pair(AttnProj::K),
                t.u[1].as_ref(),
                grad_pair(&mut grad, l, AttnProj::K),
            );
            g_h1 += &linear_backward(
                &gv,
                x1,
                &layer.attn[2],
                pair(AttnProj::V),
                t.u[2].as_ref(),
                grad_pair(&mut grad, l, AttnProj::V),
            );
            g += &layer_norm_backward(&g_h1, &t.ln1);
            debug_assert_eq!(t.x_in.nrows(), g.nrows());
        }
        g
    }

    /// Logits (rows × vocab) from final residual rows, through the last norm and
    /// the tied output embedding.
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        layer_norm(x).y.dot(&self.base.tok_emb.t())
    }

    /// Summed next-token NLL over `(row, target)` pairs of the final residual
    /// stream, and the gradient of `weight · NLL` w.r.t. that stream.
    pub fn nll(&self, x_out: &Array2<f64>, targets: &[(usize, usize)], weight: f64) -> (f64, Array2<f64>) {
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let sel = x_out.select(Axis(0), &rows);
        let ln = layer_norm(&sel);
        let logits = ln.y.dot(&self.base.tok_emb.t());
        let mut g_logits = Array2::zeros(logits.raw_dim());
        let mut total = 0.0;
        for (i, (&(_, tgt), row)) in targets.iter().zip(logits.rows()).enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[tgt];
            let mut gr = g_logits.row_mut(i);
            for (j, v) in row.iter().enumerate() {
                gr[j] = weight * (v - lse).exp();
            }
            gr[tgt] -= weight;
        }
        let g_sel = layer_norm_backward(&g_logits.dot(&self.base.tok_emb), &ln);
        let mut g = Array2::zeros(x_out.raw_dim());
        for (&r, gr) in rows.iter().zip(g_sel.rows()) {
            let mut dst = g.row_mut(r);
            dst += &gr;
        }
        (total, g)
    }

    /// Incremental forward over `x_new` (already position-encoded) given cached
    /// keys and values of earlier positions; returns the new residual rows.
    pub fn forward_cached(&self, x_new: Array2<f64>, lora: Option<&LoraAdapter>, cache: &mut KvCache) -> Array2<f64> {
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let m = x_new.nrows();
        let offset = cache.len;
        let mut x = x_new;
        for (l, layer) in self.base.layers.iter().enumerate() {
            let pair = |p: AttnProj| lora.and_then(|a| a.pair(l, p));
            let h1 = layer_norm(&x).y;
            let (q, _) = linear(&h1, &layer.attn[0], pair(AttnProj::Q));
            let (k, _) = linear(&h1, &layer.attn[1], pair(AttnProj::K));
            let (v, _) = linear(&h1, &layer.attn[2], pair(AttnProj::V));
            cache.append(l, &k, &v);
            let keys = cache.keys(l, offset + m);
            let values = cache.values(l, offset + m);
            let mut attn = Array2::zeros((m, self.cfg.d_l));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&keys.slice(cols).t());
                sc.mapv_inplace(|v| v * scale);
                softmax_rows_causal(&mut sc, offset);
                attn.slice_mut(cols).assign(&sc.dot(&values.slice(cols)));
            }
            let (o, _) = linear(&attn, &layer.attn[3], pair(AttnProj::O));
            x += &o;
            let h2 = layer_norm(&x).y;
            let act = (h2.dot(&layer.w1.t()) + &layer.b1).mapv(gelu);
            x += &(act.dot(&layer.w2.t()) + &layer.b2);
        }
        cache.len += m;
        x
    }
}

/// Per-layer key/value rows for incremental decoding.
pub(crate) struct KvCache {
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let empty = || (0..cfg.layers).map(|_| Array2::zeros((cfg.max_seq_len, cfg.d_l))).collect();
        Self { k: empty(), v: empty(), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    fn append(&mut self, layer: usize, k: &Array2<f64>, v: &Array2<f64>) {
        let rows = s![self.len..self.len + k.nrows(), ..];
        self.k[layer].slice_mut(rows).assign(k);
        self.v[layer].slice_mut(rows).assign(v);
    }

    fn keys(&self, layer: usize, n: usize) -> ArrayView2<'_, f64> {
        self.k[layer].slice(s![..n, ..])
    }

    fn values(&self, layer: usize, n: usize) -> ArrayView2<'_, f64> {
        self.v[layer].slice(s![..n, ..])
    }
}

/// Accumulates projector gradients from the gradient w.r.t. the kept video rows.
pub(crate) fn projector_backward(g_video: ArrayView2<f64>, video: ArrayView2<f64>, grad: &mut AdapterSet) {
    grad.projector.w += &g_video.t().dot(&video);
    grad.projector.b += &g_video.sum_axis(Axis(0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.37 - 2.0);
        let ln = layer_norm(&x);
        for row in ln.y.rows() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut s = Array2::from_elem((3, 3), 1.0);
        softmax_rows_causal(&mut s, 0);
        assert_eq!(s[[0, 0]], 1.0);
        assert_eq!(s[[0, 1]], 0.0);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((s.row(2).sum() - 1.0).abs() < 1e-15);
    }
}
