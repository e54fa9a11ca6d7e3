//! A small from-scratch transformer for quantile regression over text, with
//! two prediction architectures:
//!
//! * `QR`  — Q independent linear heads over one shared final hidden state
//!           (the representation-bottleneck baseline);
//! * `QT`  — Q learnable quantile tokens appended to the input; each token's
//!           hidden state is read through one shared linear regressor.
//!
//! Causal self-attention throughout, so quantile tokens at the sequence end
//! see the whole input. Neighbor quantile values enter through a value
//! channel: `embed(slot token) + value · value_proj`. All math is f64 with
//! hand-written backward passes; training is deterministic under a fixed
//! seed (per-instance gradients are reduced in instance order even when
//! computed in parallel).

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use crate::data;
use crate::distributions::{QuantileGrid, QuantileVector, Space};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind, LossTarget};
use crate::monotonic::{cumsum_backward, cumsum_decode, MonotoneMode};
use crate::retrieval::NeighborContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Qr,
    Qt,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Qr => "qr",
            Arch::Qt => "qt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qr" => Ok(Arch::Qr),
            "qt" => Ok(Arch::Qt),
            other => Err(Error::Config(format!("unknown arch {other:?} (expected qr|qt)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// The model's quantile grid levels (Q = levels.len()).
    pub levels: Vec<f64>,
    pub arch: Arch,
    pub monotone: MonotoneMode,
    pub loss: LossKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_seq_len: usize,
    pub neighbor_title_tokens: usize,
    pub k_neighbors: usize,
    /// Inverse-asymptotic-variance level weighting (off by default).
    #[serde(default)]
    pub variance_weighted: bool,
    /// Hash of the vocabulary the model was trained with.
    #[serde(default)]
    pub vocab_hash: String,
}

impl ModelConfig {
    pub fn q(&self) -> usize {
        self.levels.len()
    }

    pub fn grid(&self) -> QuantileGrid {
        QuantileGrid::new(self.levels.clone()).expect("validated levels")
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("at least one quantile level required".into()));
        }
        QuantileGrid::new(self.levels.clone())?;
        if self.arch == Arch::Qt && self.max_seq_len < self.q() + 2 {
            return Err(Error::Config("max_seq_len cannot accommodate the quantile tokens".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters: one flat buffer with a named-tensor layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub by_name: HashMap<String, usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn build(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let ff = cfg.ff_dim;
        let q = cfg.q();
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let push = |name: String, rows: usize, cols: usize, offset: &mut usize, tensors: &mut Vec<TensorSpec>| {
            tensors.push(TensorSpec { name, rows, cols, offset: *offset });
            *offset += rows * cols;
        };
        push("tok_embed".into(), cfg.vocab_size, d, &mut offset, &mut tensors);
        push("pos_embed".into(), cfg.max_seq_len, d, &mut offset, &mut tensors);
        push("value_proj".into(), 1, d, &mut offset, &mut tensors);
        if cfg.arch == Arch::Qt {
            push("qtok_embed".into(), q, d, &mut offset, &mut tensors);
        }
        for l in 0..cfg.layers {
            for (suffix, rows, cols) in [
                ("ln1.g", 1, d),
                ("ln1.b", 1, d),
                ("attn.wq", d, d),
                ("attn.bq", 1, d),
                ("attn.wk", d, d),
                ("attn.bk", 1, d),
                ("attn.wv", d, d),
                ("attn.bv", 1, d),
                ("attn.wo", d, d),
                ("attn.bo", 1, d),
                ("ln2.g", 1, d),
                ("ln2.b", 1, d),
                ("ff.w1", d, ff),
                ("ff.b1", 1, ff),
                ("ff.w2", ff, d),
                ("ff.b2", 1, d),
            ] {
                push(format!("l{l}.{suffix}"), rows, cols, &mut offset, &mut tensors);
            }
        }
        push("ln_f.g".into(), 1, d, &mut offset, &mut tensors);
        push("ln_f.b".into(), 1, d, &mut offset, &mut tensors);
        match cfg.arch {
            Arch::Qt => {
                push("head.w".into(), 1, d, &mut offset, &mut tensors);
                push("head.b".into(), 1, 1, &mut offset, &mut tensors);
            }
            Arch::Qr => {
                push("head.w".into(), q, d, &mut offset, &mut tensors);
                push("head.b".into(), 1, q, &mut offset, &mut tensors);
            }
        }
        let by_name = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        ParamLayout { tensors, by_name, total: offset }
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        &self.tensors[self.by_name[name]]
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// Seeded init: Gaussian 0.02 for embeddings and projections, ones for
    /// layer-norm gains, zeros for biases.
    pub fn init(cfg: &ModelConfig) -> Self {
        let layout = Arc::new(ParamLayout::build(cfg));
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for t in &layout.tensors {
            let slice = &mut data[t.offset..t.offset + t.rows * t.cols];
            if t.name.ends_with(".g") {
                slice.fill(1.0);
            } else if t.name.ends_with(".b") || t.name.ends_with(".b1") || t.name.ends_with(".b2")
                || t.name.ends_with("bq") || t.name.ends_with("bk") || t.name.ends_with("bv")
                || t.name.ends_with("bo")
            {
                // biases stay zero
            } else {
                for v in slice.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = 0.02 * z;
                }
            }
        }
        ModelParams { layout, data }
    }

    pub fn view(&self, name: &str) -> ArrayView2<'_, f64> {
        let t = self.layout.spec(name);
        ArrayView2::from_shape((t.rows, t.cols), &self.data[t.offset..t.offset + t.rows * t.cols])
            .expect("layout shape")
    }

    pub fn row(&self, name: &str, r: usize) -> &[f64] {
        let t = self.layout.spec(name);
        let start = t.offset + r * t.cols;
        &self.data[start..start + t.cols]
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"QCKP");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let cfg_json = serde_json::to_vec(cfg)?;
        buf.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg_json);
        buf.extend_from_slice(&(self.layout.tensors.len() as u64).to_le_bytes());
        for t in &self.layout.tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &self.data[t.offset..t.offset + t.rows * t.cols] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > buf.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = &buf[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != b"QCKP" {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(take(&mut off, cfg_len)?)?;
        cfg.validate()?;
        let layout = Arc::new(ParamLayout::build(&cfg));
        let n_tensors = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        if n_tensors != layout.tensors.len() {
            return Err(Error::Checkpoint("tensor count mismatch".into()));
        }
        let mut data = vec![0.0; layout.total];
        for t in 0..n_tensors {
            let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
            let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let spec = &layout.tensors[t];
            if spec.name != name || spec.rows != rows || spec.cols != cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} ({rows}x{cols}) does not match layout {} ({}x{})",
                    spec.name, spec.rows, spec.cols
                )));
            }
            let raw = take(&mut off, rows * cols * 8)?;
            for (i, c) in raw.chunks_exact(8).enumerate() {
                data[spec.offset + i] = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok((cfg, ModelParams { layout, data }))
    }
}

/// Gradient buffer sharing the parameter layout.
pub struct Grads {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
}

impl Grads {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let total = layout.total;
        Grads { layout, data: vec![0.0; total] }
    }

    fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let t = self.layout.spec(name);
        let (o, n) = (t.offset, t.rows * t.cols);
        &mut self.data[o..o + n]
    }

    fn add_matrix(&mut self, name: &str, m: &Array2<f64>) {
        let dst = self.slice_mut(name);
        for (d, s) in dst.iter_mut().zip(m.iter()) {
            *d += s;
        }
    }

    fn add_row(&mut self, name: &str, r: usize, v: &[f64]) {
        let t = self.layout.spec(name);
        let start = t.offset + r * t.cols;
        for (d, s) in self.data[start..start + t.cols].iter_mut().zip(v) {
            *d += s;
        }
    }
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// One position of the input: an ordinary vocabulary token or the k-th
/// learnable quantile token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Tok(usize),
    QTok(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sequence {
    pub slots: Vec<Slot>,
    /// Value channel, nonzero only at numeric positions.
    pub values: Vec<f64>,
    pub numeric: Vec<bool>,
    /// Attention mask: true for real positions, false for padding.
    pub mask: Vec<bool>,
    /// Positions of the quantile tokens (QT) in sequence order.
    pub qtok_positions: Vec<usize>,
    /// Position whose hidden state the QR heads read.
    pub read_position: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

fn push_tok(seq: &mut Sequence, tok: usize) {
    seq.slots.push(Slot::Tok(tok));
    seq.values.push(0.0);
    seq.numeric.push(false);
    seq.mask.push(true);
}

fn push_numeric(seq: &mut Sequence, tok: usize, value: f64) {
    seq.slots.push(Slot::Tok(tok));
    seq.values.push(value);
    seq.numeric.push(true);
    seq.mask.push(true);
}

fn neighbor_block(seq: &mut Sequence, nb: &NeighborContext) {
    push_tok(seq, data::NBR);
    for &t in &nb.title_tokens {
        push_tok(seq, t);
    }
    for (k, &qv) in nb.quantiles_log.iter().enumerate() {
        push_numeric(seq, data::QSLOT_BASE + k.min(data::N_QSLOTS - 1), qv);
    }
}

/// Shared layout: [neighbor blocks][SEP][query tokens], truncating the query
/// tail (never neighbors or, later, quantile tokens). `reserved` positions
/// are kept for the quantile tokens in QT mode.
fn build_prefix(
    input_tokens: &[usize],
    neighbors: &[NeighborContext],
    cfg: &ModelConfig,
    reserved: usize,
) -> Result<Sequence> {
    let mut seq = Sequence {
        slots: vec![],
        values: vec![],
        numeric: vec![],
        mask: vec![],
        qtok_positions: vec![],
        read_position: 0,
    };
    for nb in neighbors {
        neighbor_block(&mut seq, nb);
    }
    push_tok(&mut seq, data::SEP);
    let fixed = seq.len() + reserved;
    // query floor: at least one query token must survive truncation
    if fixed + 1 > cfg.max_seq_len {
        return Err(Error::SequenceOverflow {
            needed: fixed + input_tokens.len().max(1),
            max: cfg.max_seq_len,
            floor: fixed + 1,
        });
    }
    let budget = cfg.max_seq_len - fixed;
    let keep = input_tokens.len().min(budget).max(1);
    let query = if input_tokens.is_empty() { &[data::UNK][..] } else { &input_tokens[..keep] };
    for &t in query {
        push_tok(&mut seq, t);
    }
    seq.read_position = seq.len() - 1;
    Ok(seq)
}

/// QT layout: `[neighbors][SEP][query][<Q_τ1>..<Q_τQ>]`.
pub fn build_sequence_qt(
    input_tokens: &[usize],
    neighbors: &[NeighborContext],
    cfg: &ModelConfig,
) -> Result<Sequence> {
    let q = cfg.q();
    let mut seq = build_prefix(input_tokens, neighbors, cfg, q)?;
    for k in 0..q {
        seq.qtok_positions.push(seq.len());
        seq.slots.push(Slot::QTok(k));
        seq.values.push(0.0);
        seq.numeric.push(false);
        seq.mask.push(true);
    }
    Ok(seq)
}

/// QR layout: `[neighbors][SEP][query]`; heads read the final query position.
pub fn build_sequence_qr(
    input_tokens: &[usize],
    neighbors: &[NeighborContext],
    cfg: &ModelConfig,
) -> Result<Sequence> {
    build_prefix(input_tokens, neighbors, cfg, 0)
}

pub fn build_sequence(
    input_tokens: &[usize],
    neighbors: &[NeighborContext],
    cfg: &ModelConfig,
) -> Result<Sequence> {
    match cfg.arch {
        Arch::Qt => build_sequence_qt(input_tokens, neighbors, cfg),
        Arch::Qr => build_sequence_qr(input_tokens, neighbors, cfg),
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

const LN_EPS: f64 = 1e-5;

/// Per-position layer norm with affine parameters; returns normalized values
/// and the (mean, rstd) stats needed for backward.
fn layer_norm(x: &Array2<f64>, g: &[f64], b: &[f64]) -> (Array2<f64>, Vec<(f64, f64)>) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut stats = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[[i, j]] = (x[[i, j]] - mean) * rstd * g[j] + b[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Backward through layer norm; returns dx and accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    g: &[f64],
    stats: &[(f64, f64)],
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let (mean, rstd) = stats[i];
        let mut dxhat_sum = 0.0;
        let mut dxhat_xhat_sum = 0.0;
        for j in 0..d {
            let xhat = (x[[i, j]] - mean) * rstd;
            let dyij = dy[[i, j]];
            dg[j] += dyij * xhat;
            db[j] += dyij;
            let dxhat = dyij * g[j];
            dxhat_sum += dxhat;
            dxhat_xhat_sum += dxhat * xhat;
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let xhat = (x[[i, j]] - mean) * rstd;
            let dxhat = dy[[i, j]] * g[j];
            dx[[i, j]] = rstd * (dxhat - inv_d * dxhat_sum - xhat * inv_d * dxhat_xhat_sum);
        }
    }
    dx
}

struct LayerCache {
    x_in: Array2<f64>,
    ln1_out: Array2<f64>,
    ln1_stats: Vec<(f64, f64)>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>, // per head, n×n
    ctx: Array2<f64>,
    x_mid: Array2<f64>,
    ln2_out: Array2<f64>,
    ln2_stats: Vec<(f64, f64)>,
    z1: Array2<f64>,
    h1: Array2<f64>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    x_last: Array2<f64>,
    lnf_out: Array2<f64>,
    lnf_stats: Vec<(f64, f64)>,
    pub outputs: Vec<f64>,
}

fn check_finite(m: &Array2<f64>, layer: usize, stage: &'static str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer, stage });
    }
    Ok(())
}

/// Full forward pass; returns the Q raw outputs and cached activations.
pub fn forward(params: &ModelParams, seq: &Sequence, cfg: &ModelConfig) -> Result<ForwardCache> {
    let n = seq.len();
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if n > cfg.max_seq_len {
        return Err(Error::SequenceOverflow { needed: n, max: cfg.max_seq_len, floor: 0 });
    }

    // input embeddings + positions + value channel
    let mut x0 = Array2::zeros((n, d));
    let value_proj = params.row("value_proj", 0);
    for i in 0..n {
        let emb = match seq.slots[i] {
            Slot::Tok(t) => params.row("tok_embed", t.min(cfg.vocab_size - 1)),
            Slot::QTok(k) => params.row("qtok_embed", k),
        };
        let pos = params.row("pos_embed", i);
        for j in 0..d {
            x0[[i, j]] = emb[j] + pos[j];
        }
        if seq.numeric[i] {
            let v = seq.values[i];
            for j in 0..d {
                x0[[i, j]] += v * value_proj[j];
            }
        }
    }
    check_finite(&x0, 0, "embed")?;

    let mut x = x0;
    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = |s: &str| format!("l{l}.{s}");
        let x_in = x.clone();
        let (ln1_out, ln1_stats) =
            layer_norm(&x_in, params.row(&name("ln1.g"), 0), params.row(&name("ln1.b"), 0));

        let mut q = ln1_out.dot(&params.view(&name("attn.wq")));
        let mut k = ln1_out.dot(&params.view(&name("attn.wk")));
        let mut v = ln1_out.dot(&params.view(&name("attn.wv")));
        add_bias(&mut q, params.row(&name("attn.bq"), 0));
        add_bias(&mut k, params.row(&name("attn.bk"), 0));
        add_bias(&mut v, params.row(&name("attn.bv"), 0));

        let mut ctx = Array2::zeros((n, d));
        let mut probs_all = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // causal + padding mask, rowwise softmax
            let mut probs = Array2::zeros((n, n));
            for i in 0..n {
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..=i {
                    if seq.mask[j] {
                        maxv = maxv.max(scores[[i, j]]);
                    }
                }
                if maxv == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..=i {
                    if seq.mask[j] {
                        let e = (scores[[i, j]] - maxv).exp();
                        probs[[i, j]] = e;
                        z += e;
                    }
                }
                for j in 0..=i {
                    probs[[i, j]] /= z;
                }
            }
            let ctx_h = probs.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            probs_all.push(probs);
        }
        let mut attn_out = ctx.dot(&params.view(&name("attn.wo")));
        add_bias(&mut attn_out, params.row(&name("attn.bo"), 0));
        let x_mid = &x_in + &attn_out;
        check_finite(&x_mid, l, "attention")?;

        let (ln2_out, ln2_stats) =
            layer_norm(&x_mid, params.row(&name("ln2.g"), 0), params.row(&name("ln2.b"), 0));
        let mut z1 = ln2_out.dot(&params.view(&name("ff.w1")));
        add_bias(&mut z1, params.row(&name("ff.b1"), 0));
        let h1 = z1.mapv(gelu);
        let mut ff_out = h1.dot(&params.view(&name("ff.w2")));
        add_bias(&mut ff_out, params.row(&name("ff.b2"), 0));
        let x_next = &x_mid + &ff_out;
        check_finite(&x_next, l, "feed-forward")?;

        layer_caches.push(LayerCache {
            x_in,
            ln1_out,
            ln1_stats,
            q,
            k,
            v,
            probs: probs_all,
            ctx,
            x_mid,
            ln2_out,
            ln2_stats,
            z1,
            h1,
        });
        x = x_next;
    }

    let x_last = x;
    let (lnf_out, lnf_stats) =
        layer_norm(&x_last, params.row("ln_f.g", 0), params.row("ln_f.b", 0));

    let outputs = head_outputs(params, cfg, &lnf_out, seq);
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer: cfg.layers, stage: "head" });
    }
    Ok(ForwardCache { layers: layer_caches, x_last, lnf_out, lnf_stats, outputs })
}

/// Reads the Q raw outputs from final hidden states. QT applies the shared
/// regressor at each quantile-token position; QR applies Q independent heads
/// to the single read position, so QR outputs depend on the input only
/// through that one state.
pub fn head_outputs(
    params: &ModelParams,
    cfg: &ModelConfig,
    hidden: &Array2<f64>,
    seq: &Sequence,
) -> Vec<f64> {
    let d = cfg.embed_dim;
    match cfg.arch {
        Arch::Qt => {
            let w = params.row("head.w", 0);
            let b = params.row("head.b", 0)[0];
            seq.qtok_positions
                .iter()
                .map(|&p| {
                    let mut acc = b;
                    for j in 0..d {
                        acc += w[j] * hidden[[p, j]];
                    }
                    acc
                })
                .collect()
        }
        Arch::Qr => {
            let b = params.row("head.b", 0);
            (0..cfg.q())
                .map(|k| {
                    let w = params.row("head.w", k);
                    let mut acc = b[k];
                    for j in 0..d {
                        acc += w[j] * hidden[[seq.read_position, j]];
                    }
                    acc
                })
                .collect()
        }
    }
}

fn add_bias(m: &mut Array2<f64>, b: &[f64]) {
    for mut row in m.rows_mut() {
        for (x, bv) in row.iter_mut().zip(b) {
            *x += bv;
        }
    }
}

fn col_sums_into(m: &Array2<f64>, out: &mut [f64]) {
    for row in m.rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Backward pass from gradients of the loss w.r.t. the Q raw outputs.
pub fn backward(
    params: &ModelParams,
    seq: &Sequence,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    out_grad: &[f64],
    grads: &mut Grads,
) {
    let n = seq.len();
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // head backward -> gradient on the final normalized hidden states
    let mut d_lnf = Array2::zeros((n, d));
    match cfg.arch {
        Arch::Qt => {
            let w = params.row("head.w", 0);
            let mut dw = vec![0.0; d];
            let mut db = 0.0;
            for (k, &p) in seq.qtok_positions.iter().enumerate() {
                let g = out_grad[k];
                db += g;
                for j in 0..d {
                    dw[j] += g * cache.lnf_out[[p, j]];
                    d_lnf[[p, j]] += g * w[j];
                }
            }
            grads.add_row("head.w", 0, &dw);
            grads.add_row("head.b", 0, &[db]);
        }
        Arch::Qr => {
            let p = seq.read_position;
            let q = cfg.q();
            let mut db = vec![0.0; q];
            for k in 0..q {
                let g = out_grad[k];
                db[k] = g;
                let w = params.row("head.w", k);
                let mut dwk = vec![0.0; d];
                for j in 0..d {
                    dwk[j] = g * cache.lnf_out[[p, j]];
                    d_lnf[[p, j]] += g * w[j];
                }
                grads.add_row("head.w", k, &dwk);
            }
            grads.add_row("head.b", 0, &db);
        }
    }

    // final layer norm
    let mut dg_f = vec![0.0; d];
    let mut db_f = vec![0.0; d];
    let mut dx = layer_norm_backward(
        &d_lnf,
        &cache.x_last,
        params.row("ln_f.g", 0),
        &cache.lnf_stats,
        &mut dg_f,
        &mut db_f,
    );
    grads.add_row("ln_f.g", 0, &dg_f);
    grads.add_row("ln_f.b", 0, &db_f);

    for l in (0..cfg.layers).rev() {
        let name = |s: &str| format!("l{l}.{s}");
        let lc = &cache.layers[l];

        // ---- feed-forward block: x_next = x_mid + gelu(ln2(x_mid)W1+b1)W2+b2
        let d_ff_out = dx.clone(); // gradient into ff output (residual passes through)
        let mut db2 = vec![0.0; d];
        col_sums_into(&d_ff_out, &mut db2);
        grads.add_row(&name("ff.b2"), 0, &db2);
        grads.add_matrix(&name("ff.w2"), &lc.h1.t().dot(&d_ff_out));
        let dh1 = d_ff_out.dot(&params.view(&name("ff.w2")).t());
        let mut dz1 = dh1;
        for (dz, z) in dz1.iter_mut().zip(lc.z1.iter()) {
            *dz *= gelu_grad(*z);
        }
        let mut db1 = vec![0.0; cfg.ff_dim];
        col_sums_into(&dz1, &mut db1);
        grads.add_row(&name("ff.b1"), 0, &db1);
        grads.add_matrix(&name("ff.w1"), &lc.ln2_out.t().dot(&dz1));
        let d_ln2_out = dz1.dot(&params.view(&name("ff.w1")).t());
        let mut dg2 = vec![0.0; d];
        let mut db2v = vec![0.0; d];
        let d_xmid_from_ln2 = layer_norm_backward(
            &d_ln2_out,
            &lc.x_mid,
            params.row(&name("ln2.g"), 0),
            &lc.ln2_stats,
            &mut dg2,
            &mut db2v,
        );
        grads.add_row(&name("ln2.g"), 0, &dg2);
        grads.add_row(&name("ln2.b"), 0, &db2v);
        let d_xmid = &dx + &d_xmid_from_ln2;

        // ---- attention block: x_mid = x_in + (attn(ln1(x_in)))Wo + bo
        let d_attn_out = d_xmid.clone();
        let mut dbo = vec![0.0; d];
        col_sums_into(&d_attn_out, &mut dbo);
        grads.add_row(&name("attn.bo"), 0, &dbo);
        grads.add_matrix(&name("attn.wo"), &lc.ctx.t().dot(&d_attn_out));
        let d_ctx = d_attn_out.dot(&params.view(&name("attn.wo")).t());

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &lc.probs[h];
            let d_ctx_h = d_ctx.slice(cols);
            let vh = lc.v.slice(cols);
            // dprobs and dv
            let d_probs = d_ctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&d_ctx_h));
            // softmax backward per row (masked entries have probs 0)
            let mut d_scores = Array2::zeros((n, n));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += d_probs[[i, j]] * probs[[i, j]];
                }
                for j in 0..=i {
                    let p = probs[[i, j]];
                    if p != 0.0 {
                        d_scores[[i, j]] = p * (d_probs[[i, j]] - dot);
                    }
                }
            }
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let mut dqh = d_scores.dot(&kh);
            dqh *= scale;
            let mut dkh = d_scores.t().dot(&qh);
            dkh *= scale;
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
        }
        let mut dbq = vec![0.0; d];
        let mut dbk = vec![0.0; d];
        let mut dbv = vec![0.0; d];
        col_sums_into(&dq, &mut dbq);
        col_sums_into(&dk, &mut dbk);
        col_sums_into(&dv, &mut dbv);
        grads.add_row(&name("attn.bq"), 0, &dbq);
        grads.add_row(&name("attn.bk"), 0, &dbk);
        grads.add_row(&name("attn.bv"), 0, &dbv);
        grads.add_matrix(&name("attn.wq"), &lc.ln1_out.t().dot(&dq));
        grads.add_matrix(&name("attn.wk"), &lc.ln1_out.t().dot(&dk));
        grads.add_matrix(&name("attn.wv"), &lc.ln1_out.t().dot(&dv));
        let d_ln1_out = dq.dot(&params.view(&name("attn.wq")).t())
            + dk.dot(&params.view(&name("attn.wk")).t())
            + dv.dot(&params.view(&name("attn.wv")).t());
        let mut dg1 = vec![0.0; d];
        let mut db1v = vec![0.0; d];
        let d_xin_from_ln1 = layer_norm_backward(
            &d_ln1_out,
            &lc.x_in,
            params.row(&name("ln1.g"), 0),
            &lc.ln1_stats,
            &mut dg1,
            &mut db1v,
        );
        grads.add_row(&name("ln1.g"), 0, &dg1);
        grads.add_row(&name("ln1.b"), 0, &db1v);
        dx = &d_xmid + &d_xin_from_ln1;
    }

    // embedding scatter
    let value_rows: Vec<usize> = (0..n).filter(|&i| seq.numeric[i]).collect();
    let mut d_value_proj = vec![0.0; d];
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|j| dx[[i, j]]).collect();
        match seq.slots[i] {
            Slot::Tok(t) => grads.add_row("tok_embed", t.min(cfg.vocab_size - 1), &row),
            Slot::QTok(k) => grads.add_row("qtok_embed", k, &row),
        }
        grads.add_row("pos_embed", i, &row);
    }
    for &i in &value_rows {
        let v = seq.values[i];
        for j in 0..d {
            d_value_proj[j] += v * dx[[i, j]];
        }
    }
    grads.add_row("value_proj", 0, &d_value_proj);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One prepared training instance: the token sequence plus log-space targets.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub id: String,
    pub seq: Sequence,
    /// Empirical quantile targets in log space on the model grid.
    pub target: QuantileVector,
    /// Sample median of the log outcomes (Pinball-Med pseudo-target).
    pub median_log: f64,
    /// Outcome count, for variance-aware weighting.
    pub m: usize,
    /// Optional per-level weights (mean 1), used when weighting is enabled.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_avg_mape: Option<f64>,
}

/// Loss and output-gradient for one instance given raw head outputs,
/// respecting the monotone mode (cumsum decodes before the loss).
pub fn instance_loss_and_grad(
    raw: &[f64],
    inst: &TrainInstance,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<f64>)> {
    let grid = inst.target.grid.clone();
    let weights = if cfg.variance_weighted { inst.weights.as_deref() } else { None };
    let lt = LossTarget { quantiles: &inst.target, median: inst.median_log };
    match cfg.monotone {
        MonotoneMode::Cumsum => {
            let decoded = cumsum_decode(raw);
            let qv = QuantileVector::new(grid, decoded, Space::Log)?;
            let rep = losses::evaluate(cfg.loss, &lt, &qv, weights)?;
            let raw_grad = cumsum_backward(raw, &rep.gradient);
            Ok((rep.total, raw_grad))
        }
        MonotoneMode::Baseline | MonotoneMode::Postprocess => {
            let qv = QuantileVector::new(grid, raw.to_vec(), Space::Log)?;
            let rep = losses::evaluate(cfg.loss, &lt, &qv, weights)?;
            Ok((rep.total, rep.gradient))
        }
    }
}

fn global_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        let norm = global_norm(grad);
        if norm > self.clip {
            let s = self.clip / norm;
            for g in grad.iter_mut() {
                *g *= s;
            }
        }
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Mean loss over a set without touching parameters (validation).
pub fn mean_loss(params: &ModelParams, set: &[TrainInstance], cfg: &ModelConfig) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Result<Vec<f64>> = set
        .par_iter()
        .map(|inst| {
            let cache = forward(params, &inst.seq, cfg)?;
            Ok(instance_loss_and_grad(&cache.outputs, inst, cfg)?.0)
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Validation average MAPE against the exponentiated empirical targets.
fn val_avg_mape(params: &ModelParams, set: &[TrainInstance], cfg: &ModelConfig) -> Option<f64> {
    if set.is_empty() {
        return None;
    }
    let pairs: Vec<(QuantileVector, QuantileVector)> = set
        .par_iter()
        .filter_map(|inst| {
            let pred = predict(params, &inst.seq, cfg).ok()?;
            let target = inst.target.from_log_space().ok()?;
            Some((pred, target))
        })
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let preds: Vec<QuantileVector> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let targets: Vec<QuantileVector> = pairs.iter().map(|(_, t)| t.clone()).collect();
    crate::metrics::avg_mape(&preds, &targets).ok().map(|(m, _)| m)
}

/// Trains from scratch; retains the best-validation-loss parameters.
pub fn train(
    train_set: &[TrainInstance],
    val_set: &[TrainInstance],
    cfg: &ModelConfig,
) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    cfg.validate()?;
    let mut params = ModelParams::init(cfg);
    let layout = params.layout.clone();
    let mut adam = Adam::new(layout.total, cfg.lr);
    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed ^ (epoch as u64) << 17);
        for i in (1..order.len()).rev() {
            use rand::Rng;
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            // parallel per-instance forward/backward, deterministic reduce
            let results: Result<Vec<(f64, Vec<f64>)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let inst = &train_set[idx];
                    let cache = forward(&params, &inst.seq, cfg)?;
                    let (loss, out_grad) = instance_loss_and_grad(&cache.outputs, inst, cfg)?;
                    let mut g = Grads::zeros(layout.clone());
                    backward(&params, &inst.seq, cfg, &cache, &out_grad, &mut g);
                    Ok((loss, g.data))
                })
                .collect();
            let results = results?;
            let mut grad = vec![0.0; layout.total];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let bn = results.len() as f64;
            batch_loss /= bn;
            for a in grad.iter_mut() {
                *a /= bn;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            epoch_loss += batch_loss * bn;
            seen += results.len();
            adam.step(&mut params.data, &mut grad);
            if !params.all_finite() {
                return Err(Error::Divergence { epoch, step });
            }
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val_loss = mean_loss(&params, val_set, cfg)?;
        let mape = val_avg_mape(&params, val_set, cfg);
        log.push(TrainLogRow { epoch, train_loss, val_loss, val_avg_mape: mape });
        let score = if val_loss.is_nan() { train_loss } else { val_loss };
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, params.data.clone()));
        }
    }
    if let Some((_, data)) = best {
        params.data = data;
    }
    Ok((params, log))
}

/// Raw outputs -> monotone transform -> exponentiation to original units.
pub fn predict(params: &ModelParams, seq: &Sequence, cfg: &ModelConfig) -> Result<QuantileVector> {
    let cache = forward(params, seq, cfg)?;
    predict_from_raw(&cache.outputs, cfg)
}

/// The decode/repair/exponentiate tail of prediction, separated for reuse.
pub fn predict_from_raw(raw: &[f64], cfg: &ModelConfig) -> Result<QuantileVector> {
    let grid = cfg.grid();
    let log_values = match cfg.monotone {
        MonotoneMode::Baseline => raw.to_vec(),
        MonotoneMode::Cumsum => cumsum_decode(raw),
        MonotoneMode::Postprocess => {
            let mut v = raw.to_vec();
            v.sort_by(f64::total_cmp);
            v
        }
    };
    let mut values = Vec::with_capacity(log_values.len());
    for v in &log_values {
        let e = v.exp();
        if !e.is_finite() {
            return Err(Error::ExpOverflow(*v));
        }
        values.push(e);
    }
    QuantileVector::new(grid, values, Space::Original)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_cfg(arch: Arch) -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            embed_dim: 16,
            layers: 2,
            heads: 4,
            ff_dim: 32,
            levels: QuantileGrid::uniform(5).levels().to_vec(),
            arch,
            monotone: MonotoneMode::Baseline,
            loss: LossKind::L2Wasserstein,
            lr: 1e-3,
            epochs: 2,
            batch_size: 8,
            seed: 7,
            max_seq_len: 64,
            neighbor_title_tokens: 3,
            k_neighbors: 2,
            variance_weighted: false,
            vocab_hash: String::new(),
        }
    }

    fn toy_neighbor(sim: f64) -> NeighborContext {
        NeighborContext {
            id: "nb".into(),
            similarity: sim,
            title_tokens: vec![20, 21, 22],
            quantiles_log: vec![-0.9, -0.5, -0.3, -0.1, 0.0, 0.1, 0.3, 0.5, 0.9],
        }
    }

    #[test]
    fn sequence_lengths_match_arithmetic() {
        let cfg = test_cfg(Arch::Qt);
        let query = vec![30usize, 31, 32, 33];
        // zero neighbors: n + Q (+1 separator in this layout)
        let seq = build_sequence_qt(&query, &[], &cfg).unwrap();
        assert_eq!(seq.len(), 1 + query.len() + cfg.q());
        assert_eq!(seq.qtok_positions.len(), cfg.q());
        // K neighbors, each 1 marker + t title + 9 numeric
        let nbs = vec![toy_neighbor(0.9), toy_neighbor(0.8)];
        let seq2 = build_sequence_qt(&query, &nbs, &cfg).unwrap();
        assert_eq!(seq2.len(), 2 * (1 + 3 + 9) + 1 + query.len() + cfg.q());
        // numeric flags only on quantile-value slots
        let numeric_count = seq2.numeric.iter().filter(|&&b| b).count();
        assert_eq!(numeric_count, 18);
        for (i, &num) in seq2.numeric.iter().enumerate() {
            if !num {
                assert_eq!(seq2.values[i], 0.0);
            }
        }
    }

    #[test]
    fn truncation_drops_query_tail_only() {
        let mut cfg = test_cfg(Arch::Qt);
        cfg.max_seq_len = 1 + 13 + 2 + cfg.q(); // one neighbor + sep + 2 query + qtoks
        let query: Vec<usize> = (30..50).collect();
        let seq = build_sequence_qt(&query, &[toy_neighbor(0.5)], &cfg).unwrap();
        assert_eq!(seq.len(), cfg.max_seq_len);
        assert_eq!(seq.qtok_positions.len(), cfg.q());
        // first block intact
        assert_eq!(seq.slots[0], Slot::Tok(data::NBR));
        // overflow beyond the floor errors
        cfg.max_seq_len = cfg.q() + 14; // no room for sep + query
        assert!(matches!(
            build_sequence_qt(&query, &[toy_neighbor(0.5)], &cfg),
            Err(Error::SequenceOverflow { .. })
        ));
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let cfg = test_cfg(Arch::Qt);
        let mut params = ModelParams::init(&cfg);
        params.data.fill(0.0);
        // keep LN gains at 1 so the forward is well-defined
        for t in params.layout.tensors.clone() {
            if t.name.ends_with(".g") {
                params.data[t.offset..t.offset + t.cols].fill(1.0);
            }
        }
        let seq = build_sequence_qt(&[5, 6], &[], &cfg).unwrap();
        let out = forward(&params, &seq, &cfg).unwrap().outputs;
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qt_output_count_invariant() {
        let cfg = test_cfg(Arch::Qt);
        let params = ModelParams::init(&cfg);
        for n in [1usize, 3, 10] {
            let toks: Vec<usize> = (13..13 + n).collect();
            let seq = build_sequence_qt(&toks, &[], &cfg).unwrap();
            let out = forward(&params, &seq, &cfg).unwrap().outputs;
            assert_eq!(out.len(), cfg.q());
        }
        let qr_cfg = test_cfg(Arch::Qr);
        let qr_params = ModelParams::init(&qr_cfg);
        let seq = build_sequence_qr(&[13, 14], &[], &qr_cfg).unwrap();
        assert_eq!(forward(&qr_params, &seq, &qr_cfg).unwrap().outputs.len(), qr_cfg.q());
    }

    #[test]
    fn causal_mask_trailing_qtokens_do_not_affect_earlier() {
        let cfg = test_cfg(Arch::Qt);
        let params = ModelParams::init(&cfg);
        let toks = vec![14, 15, 16];
        let full = build_sequence_qt(&toks, &[toy_neighbor(0.4)], &cfg).unwrap();
        let out_full = forward(&params, &full, &cfg).unwrap().outputs;
        // drop the trailing two quantile tokens manually
        let mut shorter = full.clone();
        for _ in 0..2 {
            shorter.slots.pop();
            shorter.values.pop();
            shorter.numeric.pop();
            shorter.mask.pop();
            shorter.qtok_positions.pop();
        }
        let out_short = forward(&params, &shorter, &cfg).unwrap().outputs;
        for (a, b) in out_short.iter().zip(&out_full) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn padding_only_changes_leave_prediction_unchanged() {
        let cfg = test_cfg(Arch::Qt);
        let params = ModelParams::init(&cfg);
        let seq = build_sequence_qt(&[17, 18], &[], &cfg).unwrap();
        let base = forward(&params, &seq, &cfg).unwrap().outputs;
        let mut padded = seq.clone();
        for _ in 0..5 {
            padded.slots.push(Slot::Tok(data::PAD));
            padded.values.push(0.0);
            padded.numeric.push(false);
            padded.mask.push(false);
        }
        let out = forward(&params, &padded, &cfg).unwrap().outputs;
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn qr_outputs_depend_only_on_read_state() {
        let cfg = test_cfg(Arch::Qr);
        let params = ModelParams::init(&cfg);
        let seq = build_sequence_qr(&[13, 14, 15, 16], &[toy_neighbor(0.7)], &cfg).unwrap();
        let cache = forward(&params, &seq, &cfg).unwrap();
        // replace every other final hidden state with noise: heads must not move
        let mut noisy = cache.lnf_out.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for i in 0..noisy.nrows() {
            if i == seq.read_position {
                continue;
            }
            for j in 0..noisy.ncols() {
                noisy[[i, j]] = rng.gen_range(-10.0..10.0);
            }
        }
        let out = head_outputs(&params, &cfg, &noisy, &seq);
        for (a, b) in out.iter().zip(&cache.outputs) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn permuting_qtoken_embeddings_permutes_outputs() {
        let cfg = test_cfg(Arch::Qt);
        let mut params = ModelParams::init(&cfg);
        let seq = build_sequence_qt(&[19, 20], &[], &cfg).unwrap();
        let base = forward(&params, &seq, &cfg).unwrap().outputs;
        // swap embeddings of quantile tokens 0 and 1; positions also carry
        // information, so compare against a forward with swapped positions
        let spec = params.layout.spec("qtok_embed").clone();
        let d = cfg.embed_dim;
        for j in 0..d {
            params.data.swap(spec.offset + j, spec.offset + d + j);
        }
        let mut swapped_seq = seq.clone();
        let (p0, p1) = (seq.qtok_positions[0], seq.qtok_positions[1]);
        swapped_seq.slots[p0] = Slot::QTok(1);
        swapped_seq.slots[p1] = Slot::QTok(0);
        let out = forward(&params, &swapped_seq, &cfg).unwrap().outputs;
        assert!((out[0] - base[0]).abs() < 1e-12);
        assert!((out[1] - base[1]).abs() < 1e-12);
    }

    fn rand_instance(cfg: &ModelConfig, rng: &mut ChaCha8Rng, with_neighbor: bool) -> TrainInstance {
        let n_tokens = rng.gen_range(2..6);
        let toks: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(13..cfg.vocab_size)).collect();
        let nbs = if with_neighbor { vec![toy_neighbor(0.8)] } else { vec![] };
        let seq = build_sequence(&toks, &nbs, cfg).unwrap();
        let mut t: Vec<f64> = (0..cfg.q()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t.sort_by(f64::total_cmp);
        let target = QuantileVector::new(cfg.grid(), t, Space::Log).unwrap();
        let median_log = target.values[cfg.q() / 2];
        TrainInstance { id: "t".into(), seq, target, median_log, m: 8, weights: None }
    }

    /// Central-difference check of d(loss)/d(theta) on sampled coordinates of
    /// every parameter tensor.
    fn gradcheck(cfg: &ModelConfig, params: &ModelParams, inst: &TrainInstance, coords_per_tensor: usize) {
        let layout = params.layout.clone();
        let cache = forward(params, &inst.seq, cfg).unwrap();
        let (_, out_grad) = instance_loss_and_grad(&cache.outputs, inst, cfg).unwrap();
        let mut grads = Grads::zeros(layout.clone());
        backward(params, &inst.seq, cfg, &cache, &out_grad, &mut grads);

        let f = |p: &ModelParams| -> f64 {
            let c = forward(p, &inst.seq, cfg).unwrap();
            instance_loss_and_grad(&c.outputs, inst, cfg).unwrap().0
        };

        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let step = 1e-4;
        for t in &layout.tensors {
            let n = t.rows * t.cols;
            for _ in 0..coords_per_tensor.min(n) {
                let i = t.offset + rng.gen_range(0..n);
                let mut hi = params.clone();
                hi.data[i] += step;
                let mut lo = params.clone();
                lo.data[i] -= step;
                let fd = (f(&hi) - f(&lo)) / (2.0 * step);
                let an = grads.data[i];
                // skip coordinates with negligible gradient: central
                // differences cannot resolve them above cancellation noise
                if an.abs().max(fd.abs()) < 1e-7 {
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs());
                assert!(rel < 1e-3, "{} coord {}: analytic {an} fd {fd} rel {rel}", t.name, i - t.offset);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_qt() {
        let mut cfg = test_cfg(Arch::Qt);
        cfg.loss = LossKind::L2Wasserstein;
        let params = ModelParams::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = rand_instance(&cfg, &mut rng, true);
        gradcheck(&cfg, &params, &inst, 6);
    }

    #[test]
    fn backward_matches_finite_differences_qr() {
        let mut cfg = test_cfg(Arch::Qr);
        cfg.loss = LossKind::L2Wasserstein;
        let params = ModelParams::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = rand_instance(&cfg, &mut rng, true);
        gradcheck(&cfg, &params, &inst, 6);
    }

    #[test]
    fn backward_matches_finite_differences_cumsum_l1() {
        let mut cfg = test_cfg(Arch::Qt);
        cfg.monotone = MonotoneMode::Cumsum;
        cfg.loss = LossKind::L1Wasserstein;
        let params = ModelParams::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = rand_instance(&cfg, &mut rng, false);
        gradcheck(&cfg, &params, &inst, 4);
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let cfg = test_cfg(Arch::Qt);
        let params = ModelParams::init(&cfg);
        let seq = build_sequence_qt(&[13], &[], &cfg).unwrap();
        let cache = forward(&params, &seq, &cfg).unwrap();
        let mut grads = Grads::zeros(params.layout.clone());
        backward(&params, &seq, &cfg, &cache, &vec![0.0; cfg.q()], &mut grads);
        assert!(grads.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn training_decreases_loss_and_is_seed_deterministic() {
        let mut cfg = test_cfg(Arch::Qt);
        cfg.epochs = 5;
        cfg.lr = 3e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train_set: Vec<TrainInstance> = (0..48).map(|_| rand_instance(&cfg, &mut rng, false)).collect();
        let val_set: Vec<TrainInstance> = (0..8).map(|_| rand_instance(&cfg, &mut rng, false)).collect();
        let (p1, log1) = train(&train_set, &val_set, &cfg).unwrap();
        assert!(log1.last().unwrap().train_loss < 0.5 * log1[0].train_loss, "{log1:?}");
        let (p2, log2) = train(&train_set, &val_set, &cfg).unwrap();
        assert_eq!(p1.data, p2.data);
        assert!((log1.last().unwrap().train_loss - log2.last().unwrap().train_loss).abs() < 1e-10);
    }

    #[test]
    fn predict_modes_and_exponentiation() {
        let mut cfg = test_cfg(Arch::Qt);
        cfg.monotone = MonotoneMode::Postprocess;
        let raw = vec![0.0, 2.0, 1.0, -1.0, 0.5];
        let qv = predict_from_raw(&raw, &cfg).unwrap();
        assert_eq!(qv.space, Space::Original);
        assert!(qv.is_non_decreasing());
        assert!((qv.values[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((qv.values[4] - (2.0f64).exp()).abs() < 1e-12);

        cfg.monotone = MonotoneMode::Baseline;
        let qb = predict_from_raw(&raw, &cfg).unwrap();
        assert!((qb.values[1] - (2.0f64).exp()).abs() < 1e-12);

        cfg.monotone = MonotoneMode::Cumsum;
        let qc = predict_from_raw(&raw, &cfg).unwrap();
        assert!(qc.is_non_decreasing());

        assert!(matches!(predict_from_raw(&vec![800.0; 5], &cfg), Err(Error::ExpOverflow(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = test_cfg(Arch::Qt);
        let params = ModelParams::init(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        params.save(&cfg, &path).unwrap();
        let (cfg2, params2) = ModelParams::load(&path).unwrap();
        assert_eq!(params.data, params2.data);
        assert_eq!(cfg.levels, cfg2.levels);
        let bytes1 = std::fs::read(&path).unwrap();
        params2.save(&cfg2, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn gradient_norm_finite_over_random_batches() {
        let cfg = test_cfg(Arch::Qt);
        let params = ModelParams::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let with_nb = rng.gen_bool(0.5);
            let inst = rand_instance(&cfg, &mut rng, with_nb);
            let cache = forward(&params, &inst.seq, &cfg).unwrap();
            let (_, og) = instance_loss_and_grad(&cache.outputs, &inst, &cfg).unwrap();
            let mut g = Grads::zeros(params.layout.clone());
            backward(&params, &inst.seq, &cfg, &cache, &og, &mut g);
            assert!(global_norm(&g.data).is_finite());
        }
    }
}
