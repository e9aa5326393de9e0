//! Shared transformer primitives: affine maps, layer normalization, multi-head
//! attention, the feed-forward sub-layer, position embeddings, and conversions between
//! spatial feature maps and token sequences.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamBuilder, ParamId, Resampler, Var};
use crate::error::{Error, Result};

/// Fixed epsilon of every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Channel-first spatial activations `C x h x w` at one pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub scale: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Row-per-token sequence `n x C` at one pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub scale: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Row-major flattening of the spatial grid: token `r * w + c` holds pixel `(r, c)`.
pub fn sequentialize(feature: &FeatureMap) -> TokenSequence {
    let (ch, h, w) = feature.data.dim();
    let tokens = Array2::from_shape_fn((h * w, ch), |(t, c)| feature.data[[c, t / w, t % w]]);
    TokenSequence {
        tokens,
        scale: feature.scale,
    }
}

/// Inverse of [`sequentialize`] onto an `h x w` grid.
pub fn desequentialize(seq: &TokenSequence, h: usize, w: usize) -> Result<FeatureMap> {
    if seq.len() != h * w {
        return Err(Error::shape(format!("{} tokens cannot fill a {h}x{w} grid", seq.len())));
    }
    let data = Array3::from_shape_fn((seq.channels(), h, w), |(c, r, col)| seq.tokens[[r * w + col, c]]);
    Ok(FeatureMap { data, scale: seq.scale })
}

/// How attention logits become weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Row-normalized `softmax(QK^T / sqrt(d))`.
    Softmax,
    /// Element-wise `sigmoid(QK^T / sqrt(d))` without normalization.
    Sigmoid,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Weighting::Softmax),
            "sigmoid" => Ok(Weighting::Sigmoid),
            other => Err(Error::InvalidParam(format!("unknown weighting mode {other}"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Softmax => "softmax",
            Weighting::Sigmoid => "sigmoid",
        })
    }
}

fn ensure_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

/// `x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: pb.xavier(format!("{name}.weight"), in_dim, out_dim),
            bias: pb.constant(format!("{name}.bias"), 1, out_dim, 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.in_dim {
            return Err(Error::shape(format!(
                "linear layer expects {} channels, got {c}",
                self.in_dim
            )));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }
}

/// Per-token normalization over channels with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            gain: pb.constant(format!("{name}.gain"), 1, dim, 1.0),
            bias: pb.constant(format!("{name}.bias"), 1, dim, 0.0),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.dim {
            return Err(Error::shape(format!(
                "layer norm expects {} channels, got {c}",
                self.dim
            )));
        }
        let z = g.standardize_rows(x, LAYER_NORM_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(z, gain);
        Ok(g.add_row(y, bias))
    }
}

/// `LayerNorm(x + sublayer_output)`.
pub fn residual_norm(g: &mut Graph, norm: &LayerNorm, x: Var, sublayer_output: Var) -> Result<Var> {
    if g.shape(x) != g.shape(sublayer_output) {
        return Err(Error::shape(format!(
            "residual {:?} and sub-layer output {:?} differ",
            g.shape(x),
            g.shape(sublayer_output)
        )));
    }
    let sum = g.add(x, sublayer_output);
    norm.forward(g, sum)
}

/// Two affine maps with a GELU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, expansion: usize) -> Self {
        Self {
            expand: Linear::new(pb, &format!("{name}.expand"), dim, dim * expansion),
            contract: Linear::new(pb, &format!("{name}.contract"), dim * expansion, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = g.gelu(h);
        self.contract.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub weighting: Weighting,
    /// Hide keys that come after the query position.
    pub causal: bool,
}

/// Attention result with the per-head weight matrices (`n_q x n_k`).
pub struct Attended {
    pub output: Var,
    /// Head outputs concatenated, before the output projection.
    pub mixed: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, weighting: Weighting) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::shape(format!(
                "{dim} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(pb, &format!("{name}.query"), dim, dim),
            key: Linear::new(pb, &format!("{name}.key"), dim, dim),
            value: Linear::new(pb, &format!("{name}.value"), dim, dim),
            out: Linear::new(pb, &format!("{name}.out"), dim, dim),
            heads,
            dim,
            weighting,
            causal: false,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, queries, keys_values)?.output)
    }

    pub fn forward_detailed(&self, g: &mut Graph, queries: Var, keys_values: Var) -> Result<Attended> {
        let (n_q, c_q) = g.shape(queries);
        let (n_k, c_k) = g.shape(keys_values);
        if c_q != self.dim || c_k != self.dim {
            return Err(Error::shape(format!(
                "attention over {} channels got query {c_q} / key {c_k}",
                self.dim
            )));
        }
        if n_k == 0 {
            return Err(Error::shape("attention needs at least one key"));
        }
        ensure_finite(g, queries, "attention queries")?;
        ensure_finite(g, keys_values, "attention keys/values")?;

        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;

        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mask = self.causal.then(|| {
            g.input(Matrix::from_shape_fn(
                (n_q, n_k),
                |(i, j)| if j > i { -1e9 } else { 0.0 },
            ))
        });
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d);
            let kh = g.slice_cols(k, h * d, d);
            let vh = g.slice_cols(v, h * d, d);
            let logits = g.matmul_bt(qh, kh);
            let mut logits = g.scale(logits, scale);
            if let Some(m) = mask {
                logits = g.add(logits, m);
            }
            let w = match self.weighting {
                Weighting::Softmax => g.softmax_rows(logits),
                Weighting::Sigmoid => g.sigmoid(logits),
            };
            heads.push(g.matmul(w, vh));
            weights.push(w);
        }
        let mixed = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let output = self.out.forward(g, mixed)?;
        Ok(Attended { output, mixed, weights })
    }
}

/// Learned additive embedding, one row per token position.
#[derive(Clone, Debug)]
pub struct PositionEmbedding {
    pub table: ParamId,
    pub tokens: usize,
    pub dim: usize,
}

impl PositionEmbedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, tokens: usize, dim: usize) -> Self {
        Self {
            table: pb.normal(format!("{name}.table"), tokens, dim, 0.02),
            tokens,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x) != (self.tokens, self.dim) {
            return Err(Error::shape(format!(
                "position table is {}x{}, tokens are {:?}",
                self.tokens,
                self.dim,
                g.shape(x)
            )));
        }
        let table = g.param(self.table);
        Ok(g.add(x, table))
    }
}

/// Post-norm transformer block whose keys/values may be average-pooled over the grid.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub feed_forward_norm: LayerNorm,
    pub kv_pool: Option<Rc<Resampler>>,
}

impl TransformerBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        grid: (usize, usize),
        kv_stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(pb, &format!("{name}.attention"), dim, heads, Weighting::Softmax)?,
            attention_norm: LayerNorm::new(pb, &format!("{name}.attention_norm"), dim),
            feed_forward: FeedForward::new(pb, &format!("{name}.feed_forward"), dim, 4),
            feed_forward_norm: LayerNorm::new(pb, &format!("{name}.feed_forward_norm"), dim),
            kv_pool: kv_pooler(grid, kv_stride)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let kv = match &self.kv_pool {
            Some(pool) => g.resample(x, pool.clone()),
            None => x,
        };
        let attended = self.attention.forward(g, x, kv)?;
        let a = residual_norm(g, &self.attention_norm, x, attended)?;
        let f = self.feed_forward.forward(g, a)?;
        residual_norm(g, &self.feed_forward_norm, a, f)
    }
}

/// Average-pooling map for keys/values, or `None` when the stride is 1.
pub fn kv_pooler(grid: (usize, usize), stride: usize) -> Result<Option<Rc<Resampler>>> {
    let (h, w) = grid;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "key/value stride {stride} does not tile a {h}x{w} grid"
        )));
    }
    Ok((stride > 1).then(|| Rc::new(Resampler::avg_pool(h, w, stride))))
}
