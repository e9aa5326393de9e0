//! Boundary learners: the implicit (im-Bound) and explicit (ex-Bound) per-scale blocks
//! and the cross-scale (X-Bound) fusion of adjacent pyramid levels.

use std::rc::Rc;

use ndarray::Array2;

use crate::attention::{kv_pooler, residual_norm, FeedForward, LayerNorm, Linear, MultiHeadAttention, Weighting};
use crate::autograd::{Graph, ParamBuilder, Resampler, Var};
use crate::error::{Error, Result};

/// Learned boundary summary for one scale (`1 x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryEmbedding {
    pub vector: Array2<f64>,
    pub scale: usize,
}

/// `rho * (1 + m)` with `m` (`n x 1`) broadcast over channels.
pub fn boundary_gate(g: &mut Graph, rho: Var, key_map: Var) -> Result<Var> {
    let (n, _) = g.shape(rho);
    if g.shape(key_map) != (n, 1) {
        return Err(Error::shape(format!(
            "gate over {n} tokens got key map {:?}",
            g.shape(key_map)
        )));
    }
    let gain = g.add_scalar(key_map, 1.0);
    Ok(g.mul_col(rho, gain))
}

/// Affine `C -> 1` followed by a sigmoid, giving a per-token key-point probability.
#[derive(Clone, Debug)]
pub struct KeyPointPredictor {
    pub linear: Linear,
}

impl KeyPointPredictor {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            linear: Linear::new(pb, name, dim, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = self.linear.forward(g, x)?;
        Ok(g.sigmoid(logits))
    }
}

/// Outputs of one im-Bound block. `key_map` holds one probability per token (`n x 1`).
pub struct ImBoundOutput {
    pub features: Var,
    pub rho: Var,
    pub key_map: Var,
}

/// Self-attention block whose predicted key-point map gates its own output.
#[derive(Clone, Debug)]
pub struct ImBoundBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub feed_forward_norm: LayerNorm,
    pub predictor: KeyPointPredictor,
    pub kv_pool: Option<Rc<Resampler>>,
    pub tokens: usize,
}

impl ImBoundBlock {
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
            predictor: KeyPointPredictor::new(pb, &format!("{name}.predictor"), dim),
            kv_pool: kv_pooler(grid, kv_stride)?,
            tokens: grid.0 * grid.1,
        })
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<ImBoundOutput> {
        let (n, _) = g.shape(z);
        if n != self.tokens {
            return Err(Error::shape(format!("block expects {} tokens, got {n}", self.tokens)));
        }
        let kv = match &self.kv_pool {
            Some(pool) => g.resample(z, pool.clone()),
            None => z,
        };
        let attended = self.attention.forward(g, z, kv)?;
        let a = residual_norm(g, &self.attention_norm, z, attended)?;
        let f = self.feed_forward.forward(g, a)?;
        let rho = residual_norm(g, &self.feed_forward_norm, a, f)?;
        let key_map = self.predictor.forward(g, rho)?;
        let features = boundary_gate(g, rho, key_map)?;
        Ok(ImBoundOutput { features, rho, key_map })
    }
}

/// Outputs of one ex-Bound block.
pub struct ExBoundOutput {
    pub features: Var,
    pub embedding: Var,
    pub key_map: Var,
    /// Attention output added to the tokens before refinement normalization.
    pub refinement_term: Var,
}

/// Decoder-style block that updates the boundary query from the tokens, then refines
/// the tokens by attending to the updated query.
#[derive(Clone, Debug)]
pub struct ExBoundBlock {
    pub query_attention: MultiHeadAttention,
    pub query_attention_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub cross_attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub feed_forward_norm: LayerNorm,
    pub refine_attention: MultiHeadAttention,
    pub refine_norm: LayerNorm,
    pub predictor: KeyPointPredictor,
    pub dim: usize,
    pub tokens: usize,
}

impl ExBoundBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, tokens: usize) -> Result<Self> {
        let mut query_attention =
            MultiHeadAttention::new(pb, &format!("{name}.query_attention"), dim, heads, Weighting::Softmax)?;
        query_attention.causal = true;
        Ok(Self {
            query_attention,
            query_attention_norm: LayerNorm::new(pb, &format!("{name}.query_attention_norm"), dim),
            cross_attention: MultiHeadAttention::new(
                pb,
                &format!("{name}.cross_attention"),
                dim,
                heads,
                Weighting::Softmax,
            )?,
            cross_attention_norm: LayerNorm::new(pb, &format!("{name}.cross_attention_norm"), dim),
            feed_forward: FeedForward::new(pb, &format!("{name}.feed_forward"), dim, 4),
            feed_forward_norm: LayerNorm::new(pb, &format!("{name}.feed_forward_norm"), dim),
            refine_attention: MultiHeadAttention::new(
                pb,
                &format!("{name}.refine_attention"),
                dim,
                heads,
                Weighting::Softmax,
            )?,
            refine_norm: LayerNorm::new(pb, &format!("{name}.refine_norm"), dim),
            predictor: KeyPointPredictor::new(pb, &format!("{name}.predictor"), dim),
            dim,
            tokens,
        })
    }

    pub fn forward(&self, g: &mut Graph, z: Var, xi: Var) -> Result<ExBoundOutput> {
        let (n, c) = g.shape(z);
        if n != self.tokens || c != self.dim {
            return Err(Error::shape(format!(
                "block expects {}x{} tokens, got {n}x{c}",
                self.tokens, self.dim
            )));
        }
        if g.shape(xi) != (1, self.dim) {
            return Err(Error::shape(format!(
                "boundary embedding must be 1x{}, got {:?}",
                self.dim,
                g.shape(xi)
            )));
        }
        let s = self.query_attention.forward(g, xi, xi)?;
        let q = residual_norm(g, &self.query_attention_norm, xi, s)?;
        let x = self.cross_attention.forward(g, q, z)?;
        let q = residual_norm(g, &self.cross_attention_norm, q, x)?;
        let f = self.feed_forward.forward(g, q)?;
        let embedding = residual_norm(g, &self.feed_forward_norm, q, f)?;

        let refinement_term = self.refine_attention.forward(g, z, embedding)?;
        let refined = residual_norm(g, &self.refine_norm, z, refinement_term)?;
        let key_map = self.predictor.forward(g, refined)?;
        let features = boundary_gate(g, refined, key_map)?;
        Ok(ExBoundOutput {
            features,
            embedding,
            key_map,
            refinement_term,
        })
    }
}

/// Outputs of a cross-scale fusion.
pub struct XBoundOutput {
    pub fused: Var,
    /// Attention terms added to the lower- and higher-scale tokens.
    pub low_term: Var,
    pub high_term: Var,
}

/// Exchanges boundary embeddings between scale `l` (low, finer) and `l + 1` (high,
/// coarser), then fuses both onto the finer grid.
#[derive(Clone, Debug)]
pub struct XBoundFuse {
    pub high_to_low: Linear,
    pub low_to_high: Linear,
    pub low_attention: MultiHeadAttention,
    pub high_attention: MultiHeadAttention,
    pub projection: Linear,
    pub upsample: Rc<Resampler>,
    pub low_grid: (usize, usize),
    pub high_grid: (usize, usize),
}

impl XBoundFuse {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        low_dim: usize,
        high_dim: usize,
        low_heads: usize,
        high_heads: usize,
        low_grid: (usize, usize),
        weighting: Weighting,
    ) -> Result<Self> {
        let (h, w) = low_grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("fine grid {h}x{w} cannot be halved")));
        }
        let high_grid = (h / 2, w / 2);
        Ok(Self {
            high_to_low: Linear::new(pb, &format!("{name}.high_to_low"), high_dim, low_dim),
            low_to_high: Linear::new(pb, &format!("{name}.low_to_high"), low_dim, high_dim),
            low_attention: MultiHeadAttention::new(
                pb,
                &format!("{name}.low_attention"),
                low_dim,
                low_heads,
                weighting,
            )?,
            high_attention: MultiHeadAttention::new(
                pb,
                &format!("{name}.high_attention"),
                high_dim,
                high_heads,
                weighting,
            )?,
            projection: Linear::new(pb, &format!("{name}.projection"), low_dim + high_dim, low_dim),
            upsample: Rc::new(Resampler::bilinear_up(high_grid.0, high_grid.1, 2)),
            low_grid,
            high_grid,
        })
    }

    pub fn forward(&self, g: &mut Graph, f_low: Var, xi_low: Var, f_high: Var, xi_high: Var) -> Result<XBoundOutput> {
        let (n_low, _) = g.shape(f_low);
        let (n_high, _) = g.shape(f_high);
        if n_low != self.low_grid.0 * self.low_grid.1 || n_high != self.high_grid.0 * self.high_grid.1 {
            return Err(Error::shape(format!(
                "fusion expects {:?} and {:?} grids, got {n_low} and {n_high} tokens",
                self.low_grid, self.high_grid
            )));
        }
        let xi_for_low = self.high_to_low.forward(g, xi_high)?;
        let xi_for_high = self.low_to_high.forward(g, xi_low)?;
        let low_term = self.low_attention.forward(g, f_low, xi_for_low)?;
        let high_term = self.high_attention.forward(g, f_high, xi_for_high)?;
        let gamma_low = g.add(f_low, low_term);
        let gamma_high = g.add(f_high, high_term);
        let up = g.resample(gamma_high, self.upsample.clone());
        let joined = g.concat_cols(&[gamma_low, up]);
        let fused = self.projection.forward(g, joined)?;
        Ok(XBoundOutput {
            fused,
            low_term,
            high_term,
        })
    }
}

/// Fusion used when cross-scale learning is disabled: upsample, concatenate, project.
#[derive(Clone, Debug)]
pub struct PlainFuse {
    pub projection: Linear,
    pub upsample: Rc<Resampler>,
    pub low_grid: (usize, usize),
}

impl PlainFuse {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        low_dim: usize,
        high_dim: usize,
        low_grid: (usize, usize),
    ) -> Result<Self> {
        let (h, w) = low_grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("fine grid {h}x{w} cannot be halved")));
        }
        Ok(Self {
            projection: Linear::new(pb, &format!("{name}.projection"), low_dim + high_dim, low_dim),
            upsample: Rc::new(Resampler::bilinear_up(h / 2, w / 2, 2)),
            low_grid,
        })
    }

    pub fn forward(&self, g: &mut Graph, f_low: Var, f_high: Var) -> Result<Var> {
        if g.shape(f_high).0 != self.upsample.rows_in || g.shape(f_low).0 != self.low_grid.0 * self.low_grid.1 {
            return Err(Error::shape("fusion inputs do not match the configured grids"));
        }
        let up = g.resample(f_high, self.upsample.clone());
        let joined = g.concat_cols(&[f_low, up]);
        self.projection.forward(g, joined)
    }
}
