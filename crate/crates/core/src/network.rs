//! The full segmentation model: pyramid encoder, per-scale boundary learners,
//! cross-scale fusion, and per-scale classification heads.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{LayerNorm, Linear, PositionEmbedding, TransformerBlock, Weighting};
use crate::autograd::{sigmoid, Graph, Matrix, ParamBuilder, ParamId, ParamStore, Resampler, Var};
use crate::error::{Error, Result};
use crate::learners::{BoundaryEmbedding, ExBoundBlock, ImBoundBlock, PlainFuse, XBoundFuse};
use crate::mask::{BinaryMask, KeyPointMap};

/// Number of pyramid scales.
pub const SCALES: usize = 4;

/// Input image channels.
pub const IMAGE_CHANNELS: usize = 3;

/// Pixel intensities are mapped to `(v - INPUT_CENTER) / INPUT_SPREAD` before embedding.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_SPREAD: f64 = 0.25;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side length in pixels.
    pub input_size: usize,
    pub channels: [usize; SCALES],
    pub heads: [usize; SCALES],
    pub n_im: usize,
    pub n_ex: usize,
    /// Key/value average-pooling stride of the attention layers at each scale.
    pub kv_strides: [usize; SCALES],
    /// Transformer blocks per encoder stage.
    pub encoder_depth: usize,
    /// Cross-scale boundary exchange; without it adjacent scales are fused by
    /// upsample-concatenate-project only.
    pub x_bound: bool,
    pub x_weighting: Weighting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64 input with the standard channel widths.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            channels: [32, 64, 128, 256],
            heads: [2, 2, 2, 2],
            n_im: 2,
            n_ex: 2,
            kv_strides: [4, 2, 1, 1],
            encoder_depth: 2,
            x_bound: true,
            x_weighting: Weighting::Sigmoid,
        }
    }

    /// Full-resolution 512x512 configuration.
    pub fn full() -> Self {
        Self {
            input_size: 512,
            ..Self::desk()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn micro() -> Self {
        Self {
            input_size: 32,
            channels: [8, 8, 16, 16],
            heads: [2, 2, 2, 2],
            n_im: 1,
            n_ex: 1,
            kv_strides: [2, 1, 1, 1],
            encoder_depth: 1,
            x_bound: true,
            x_weighting: Weighting::Sigmoid,
        }
    }

    /// Side length of the token grid at scale `l` (1-based).
    pub fn grid(&self, scale: usize) -> usize {
        self.input_size >> (scale + 1)
    }

    pub fn key_maps_per_scale(&self) -> usize {
        self.n_im + self.n_ex
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Dimension {
                dim: self.input_size,
                divisor: 32,
            });
        }
        for l in 0..SCALES {
            let (c, h, s) = (self.channels[l], self.heads[l], self.kv_strides[l]);
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::InvalidParam(format!(
                    "scale {}: {c} channels cannot be split into {h} heads",
                    l + 1
                )));
            }
            let grid = self.grid(l + 1);
            if s == 0 || !grid.is_multiple_of(s) {
                return Err(Error::InvalidParam(format!(
                    "scale {}: key/value stride {s} does not tile a {grid}x{grid} grid",
                    l + 1
                )));
            }
        }
        if self.encoder_depth == 0 {
            return Err(Error::InvalidParam("encoder needs at least one block per stage".into()));
        }
        if self.x_bound && self.n_ex == 0 {
            return Err(Error::InvalidParam(
                "cross-scale fusion needs boundary embeddings (n_ex >= 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One encoder stage: patch embedding, position embedding, normalization, blocks.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub embed: Linear,
    pub positions: PositionEmbedding,
    pub norm: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    /// Space-to-depth index of 2x2 neighborhoods from the previous stage (absent at
    /// the first stage, which embeds raw 4x4 pixel patches).
    pub merge: Option<Rc<Vec<usize>>>,
    pub grid: usize,
}

/// Four-stage pyramid transformer producing `f_l^0`.
#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    pub stages: Vec<EncoderStage>,
    pub input_size: usize,
}

/// Flattens non-overlapping `p x p` patches of a `C x H x W` image into rows ordered
/// `(channel, dy, dx)`.
pub fn image_patches(image: &Array3<f64>, patch: usize) -> Matrix {
    let (ch, h, w) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    Matrix::from_shape_fn((gh * gw, ch * patch * patch), |(t, k)| {
        let (r, c) = (t / gw, t % gw);
        let (channel, rest) = (k / (patch * patch), k % (patch * patch));
        let (dy, dx) = (rest / patch, rest % patch);
        image[[channel, r * patch + dy, c * patch + dx]]
    })
}

/// Gather index merging each 2x2 token neighborhood of an `s x s` grid with `c`
/// channels into one token of `4c` channels ordered `(dy, dx, channel)`.
pub fn merge_index(s: usize, c: usize) -> Vec<usize> {
    let half = s / 2;
    let mut index = Vec::with_capacity(s * s * c);
    for r in 0..half {
        for col in 0..half {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = (2 * r + dy) * s + 2 * col + dx;
                    index.extend((0..c).map(|ch| src * c + ch));
                }
            }
        }
    }
    index
}

impl PyramidEncoder {
    pub fn new(pb: &mut ParamBuilder, config: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            let grid = config.grid(l + 1);
            let dim = config.channels[l];
            let name = format!("encoder.{}", l + 1);
            let (in_dim, merge) = if l == 0 {
                (IMAGE_CHANNELS * 16, None)
            } else {
                let prev = config.channels[l - 1];
                (4 * prev, Some(Rc::new(merge_index(grid * 2, prev))))
            };
            let blocks = (0..config.encoder_depth)
                .map(|b| {
                    TransformerBlock::new(
                        pb,
                        &format!("{name}.block{b}"),
                        dim,
                        config.heads[l],
                        (grid, grid),
                        config.kv_strides[l],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(EncoderStage {
                embed: Linear::new(pb, &format!("{name}.embed"), in_dim, dim),
                positions: PositionEmbedding::new(pb, &format!("{name}.positions"), grid * grid, dim),
                norm: LayerNorm::new(pb, &format!("{name}.norm"), dim),
                blocks,
                merge,
                grid,
            });
        }
        Ok(Self {
            stages,
            input_size: config.input_size,
        })
    }

    /// Returns `f_1^0 .. f_4^0` as token sequences.
    pub fn forward(&self, g: &mut Graph, image: &Array3<f64>) -> Result<Vec<Var>> {
        let patches = image_patches(image, 4).mapv(|v| (v - INPUT_CENTER) / INPUT_SPREAD);
        let patches = g.input(patches);
        let mut outputs = Vec::with_capacity(SCALES);
        let mut x = patches;
        for stage in &self.stages {
            if let Some(index) = &stage.merge {
                let (n, c) = g.shape(x);
                x = g.gather(x, index.clone(), n / 4, 4 * c);
            }
            let embedded = stage.embed.forward(g, x)?;
            let positioned = stage.positions.forward(g, embedded)?;
            let mut h = stage.norm.forward(g, positioned)?;
            for block in &stage.blocks {
                h = block.forward(g, h)?;
            }
            outputs.push(h);
            x = h;
        }
        Ok(outputs)
    }
}

/// Boundary learners of one scale.
#[derive(Clone, Debug)]
pub struct ScaleLearners {
    pub positions: PositionEmbedding,
    pub im_blocks: Vec<ImBoundBlock>,
    pub ex_blocks: Vec<ExBoundBlock>,
    /// Initial boundary query fed to the first ex-Bound block.
    pub initial_query: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Cross(Box<XBoundFuse>),
    Plain(PlainFuse),
}

/// Graph handles of one forward pass. Token maps are `n_l x 1` columns in row-major
/// grid order.
pub struct ForwardVars {
    pub seg_logits: Vec<Var>,
    /// `key_maps[l][b]`: prediction of block `b` (im-Bound blocks first) at scale `l`.
    pub key_maps: Vec<Vec<Var>>,
    pub embeddings: Vec<Option<Var>>,
    pub encoded: Vec<Var>,
    pub learned: Vec<Var>,
    pub fused: Vec<Var>,
}

/// A predicted key-point map tagged with its scale (1-based) and block index.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleKeyMap {
    pub scale: usize,
    pub block: usize,
    pub map: KeyPointMap,
}

/// Concrete values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pre-sigmoid segmentation logits per scale, `h_l x w_l`.
    pub seg_logits: Vec<Array2<f64>>,
    pub key_maps: Vec<ScaleKeyMap>,
    pub embeddings: Vec<BoundaryEmbedding>,
    /// Feature maps after the boundary learners (`f_l^1`), as `n_l x C_l` tokens.
    pub learned: Vec<Array2<f64>>,
    /// Fused feature maps (`f_l^2`).
    pub fused: Vec<Array2<f64>>,
    pub encoded: Vec<Array2<f64>>,
}

/// Pyramid transformer with implicit, explicit and cross-scale boundary learners.
#[derive(Clone, Debug)]
pub struct XBoundFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: PyramidEncoder,
    pub scales: Vec<ScaleLearners>,
    pub fusions: Vec<Fusion>,
    pub heads: Vec<Linear>,
}

fn to_grid(column: &Matrix, side: usize) -> Array2<f64> {
    Array2::from_shape_fn((side, side), |(r, c)| column[[r * side + c, 0]])
}

impl XBoundFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, seed);
        let encoder = PyramidEncoder::new(&mut pb, &config)?;

        let mut scales = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            let grid = config.grid(l + 1);
            let dim = config.channels[l];
            let name = format!("scale{}", l + 1);
            let im_blocks = (0..config.n_im)
                .map(|b| {
                    ImBoundBlock::new(
                        &mut pb,
                        &format!("{name}.im{b}"),
                        dim,
                        config.heads[l],
                        (grid, grid),
                        config.kv_strides[l],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let ex_blocks = (0..config.n_ex)
                .map(|b| ExBoundBlock::new(&mut pb, &format!("{name}.ex{b}"), dim, config.heads[l], grid * grid))
                .collect::<Result<Vec<_>>>()?;
            let initial_query = (config.n_ex > 0).then(|| pb.normal(format!("{name}.query"), 1, dim, 0.02));
            scales.push(ScaleLearners {
                positions: PositionEmbedding::new(&mut pb, &format!("{name}.positions"), grid * grid, dim),
                im_blocks,
                ex_blocks,
                initial_query,
            });
        }

        let mut fusions = Vec::with_capacity(SCALES - 1);
        for l in 0..SCALES - 1 {
            let grid = config.grid(l + 1);
            let name = format!("fuse{}", l + 1);
            let (low, high) = (config.channels[l], config.channels[l + 1]);
            fusions.push(if config.x_bound {
                Fusion::Cross(Box::new(XBoundFuse::new(
                    &mut pb,
                    &name,
                    low,
                    high,
                    config.heads[l],
                    config.heads[l + 1],
                    (grid, grid),
                    config.x_weighting,
                )?))
            } else {
                Fusion::Plain(PlainFuse::new(&mut pb, &name, low, high, (grid, grid))?)
            });
        }

        let heads = (0..SCALES)
            .map(|l| Linear::new(&mut pb, &format!("head{}", l + 1), config.channels[l], 1))
            .collect();

        Ok(Self {
            config,
            params,
            encoder,
            scales,
            fusions,
            heads,
        })
    }

    pub fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let s = self.config.input_size;
        if image.dim() != (IMAGE_CHANNELS, s, s) {
            return Err(Error::shape(format!(
                "model expects a {IMAGE_CHANNELS}x{s}x{s} image, got {:?}",
                image.dim()
            )));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("input image".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `g`, which must borrow this model's parameters.
    pub fn forward_graph(&self, g: &mut Graph, image: &Array3<f64>) -> Result<ForwardVars> {
        self.check_image(image)?;
        let encoded = self.encoder.forward(g, image)?;

        let mut learned = Vec::with_capacity(SCALES);
        let mut key_maps = Vec::with_capacity(SCALES);
        let mut embeddings = Vec::with_capacity(SCALES);
        for (scale, &f0) in self.scales.iter().zip(&encoded) {
            let mut z = scale.positions.forward(g, f0)?;
            let mut maps = Vec::with_capacity(self.config.key_maps_per_scale());
            for block in &scale.im_blocks {
                let out = block.forward(g, z)?;
                z = out.features;
                maps.push(out.key_map);
            }
            let mut xi = scale.initial_query.map(|q| g.param(q));
            for block in &scale.ex_blocks {
                let query = xi.expect("ex-Bound blocks come with an initial query");
                let out = block.forward(g, z, query)?;
                z = out.features;
                xi = Some(out.embedding);
                maps.push(out.key_map);
            }
            learned.push(z);
            key_maps.push(maps);
            embeddings.push(xi);
        }

        let mut fused = Vec::with_capacity(SCALES);
        for (l, fusion) in self.fusions.iter().enumerate() {
            let f = match fusion {
                Fusion::Cross(x) => {
                    let (xi_low, xi_high) = match (embeddings[l], embeddings[l + 1]) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(Error::InvalidParam("cross-scale fusion without embeddings".into())),
                    };
                    x.forward(g, learned[l], xi_low, learned[l + 1], xi_high)?.fused
                }
                Fusion::Plain(p) => p.forward(g, learned[l], learned[l + 1])?,
            };
            fused.push(f);
        }
        fused.push(learned[SCALES - 1]);

        let seg_logits = self
            .heads
            .iter()
            .zip(&fused)
            .map(|(head, &f)| head.forward(g, f))
            .collect::<Result<Vec<_>>>()?;

        Ok(ForwardVars {
            seg_logits,
            key_maps,
            embeddings,
            encoded,
            learned,
            fused,
        })
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<ForwardOutput> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward_graph(&mut g, image)?;
        let mut key_maps = Vec::new();
        for (l, maps) in vars.key_maps.iter().enumerate() {
            let side = self.config.grid(l + 1);
            for (b, &m) in maps.iter().enumerate() {
                key_maps.push(ScaleKeyMap {
                    scale: l + 1,
                    block: b,
                    map: KeyPointMap::from_array(to_grid(g.value(m), side)),
                });
            }
        }
        let embeddings = vars
            .embeddings
            .iter()
            .enumerate()
            .filter_map(|(l, xi)| {
                xi.map(|v| BoundaryEmbedding {
                    vector: g.value(v).clone(),
                    scale: l + 1,
                })
            })
            .collect();
        let values = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
        let out = ForwardOutput {
            seg_logits: vars
                .seg_logits
                .iter()
                .enumerate()
                .map(|(l, &v)| to_grid(g.value(v), self.config.grid(l + 1)))
                .collect(),
            key_maps,
            embeddings,
            learned: values(&vars.learned),
            fused: values(&vars.fused),
            encoded: values(&vars.encoded),
        };
        if out.seg_logits.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("segmentation logits".into()));
        }
        Ok(out)
    }

    /// Full-resolution foreground probabilities from the finest head.
    pub fn predict_probabilities(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let out = self.forward(image)?;
        Ok(upsample_probabilities(&out.seg_logits[0], 4))
    }

    pub fn predict(&self, image: &Array3<f64>, threshold: f64) -> Result<BinaryMask> {
        Ok(BinaryMask::threshold(&self.predict_probabilities(image)?, threshold))
    }
}

/// Sigmoid of `logits` followed by bilinear upsampling by `factor`.
pub fn upsample_probabilities(logits: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = logits.dim();
    let column = Matrix::from_shape_fn((h * w, 1), |(t, _)| sigmoid(logits[[t / w, t % w]]));
    let up = Resampler::bilinear_up(h, w, factor).apply(&column);
    let ow = w * factor;
    Array2::from_shape_fn((h * factor, ow), |(r, c)| up[[r * ow + c, 0]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_shapes() {
        let model = XBoundFormer::new(ModelConfig::desk(), 1).unwrap();
        let out = model.forward(&Array3::zeros((3, 64, 64))).unwrap();
        let sides: Vec<_> = out.seg_logits.iter().map(|m| m.dim()).collect();
        assert_eq!(sides, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(out.key_maps.len(), 16);
        assert_eq!(out.embeddings.len(), 4);
        for (l, f) in out.encoded.iter().enumerate() {
            assert_eq!(f.dim(), ((16 >> l) * (16 >> l), [32, 64, 128, 256][l]));
        }
        assert_eq!(out.fused[3], out.learned[3]);
    }

    #[test]
    fn key_map_count_follows_block_counts() {
        let config = ModelConfig {
            n_im: 1,
            n_ex: 1,
            ..ModelConfig::desk()
        };
        let model = XBoundFormer::new(config, 1).unwrap();
        let out = model.forward(&Array3::zeros((3, 64, 64))).unwrap();
        assert_eq!(out.key_maps.len(), 8);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let bad = ModelConfig {
            input_size: 48,
            ..ModelConfig::desk()
        };
        assert!(XBoundFormer::new(bad, 0).is_err());
        let no_ex = ModelConfig {
            n_ex: 0,
            ..ModelConfig::desk()
        };
        assert!(XBoundFormer::new(no_ex, 0).is_err());
        let model = XBoundFormer::new(ModelConfig::micro(), 0).unwrap();
        assert!(matches!(
            model.forward(&Array3::zeros((3, 64, 64))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn saturated_logits_threshold_to_constant_masks() {
        let high = Array2::from_elem((16, 16), 40.0);
        assert_eq!(
            BinaryMask::threshold(&upsample_probabilities(&high, 4), 0.5),
            BinaryMask::ones(64, 64)
        );
        let low = Array2::from_elem((16, 16), -40.0);
        assert!(BinaryMask::threshold(&upsample_probabilities(&low, 4), 0.5).is_empty());
    }

    #[test]
    fn merge_index_groups_neighborhoods() {
        // 4x4 grid, one channel: first merged token holds pixels (0,0),(0,1),(1,0),(1,1).
        let index = merge_index(4, 1);
        assert_eq!(&index[..4], &[0, 1, 4, 5]);
        assert_eq!(&index[4..8], &[2, 3, 6, 7]);
    }
}
