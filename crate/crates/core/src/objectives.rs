//! Multi-scale segmentation and key-point objectives, in value form and as graph
//! nodes for training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::keypoints::{build_keypoint_pyramid, generate_keypoint_map};
use crate::mask::{BinaryMask, KeyPointMap};
use crate::network::{ForwardOutput, ForwardVars, SCALES};

/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Probability clamp of the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Ground truth at every pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPyramid {
    pub seg: Vec<BinaryMask>,
    pub keypoints: Vec<KeyPointMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 2.0 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParam(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub map: f64,
}

pub fn build_label_pyramid(mask: &BinaryMask, radius: usize, k: usize) -> Result<LabelPyramid> {
    let (h, w) = mask.dims();
    for dim in [h, w] {
        if dim % 32 != 0 {
            return Err(Error::Dimension { dim, divisor: 32 });
        }
    }
    let seg = (1..=SCALES)
        .map(|l| mask.downsample_nearest(1 << (l + 1)))
        .collect::<Result<Vec<_>>>()?;
    let keypoints = build_keypoint_pyramid(&generate_keypoint_map(mask, radius, k)?, SCALES)?;
    Ok(LabelPyramid { seg, keypoints })
}

fn check_dims(pred: (usize, usize), target: (usize, usize)) -> Result<()> {
    if pred != target {
        return Err(Error::shape(format!("prediction {pred:?} vs target {target:?}")));
    }
    Ok(())
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &Array2<f64>, target: &BinaryMask) -> Result<f64> {
    check_dims(pred.dim(), target.dims())?;
    let t = target.to_f64();
    let inter = (pred * &t).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + t.sum() + DICE_EPS))
}

/// Mean per-pixel binary cross-entropy of one map.
pub fn bce(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_dims(pred.dim(), target.dim())?;
    let total: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean over all predicted maps of their cross-entropy against the target of the
/// map's scale. `preds` pairs a 1-based scale with a prediction. No maps gives 0.
pub fn map_loss(preds: &[(usize, &KeyPointMap)], targets: &LabelPyramid) -> Result<f64> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(scale, pred) in preds {
        let target = scale
            .checked_sub(1)
            .and_then(|i| targets.keypoints.get(i))
            .ok_or_else(|| Error::InvalidParam(format!("no target for scale {scale}")))?;
        total += bce(pred.values(), target.values())?;
    }
    Ok(total / preds.len() as f64)
}

pub fn seg_loss(logits: &[Array2<f64>], targets: &LabelPyramid) -> Result<f64> {
    if logits.len() != targets.seg.len() {
        return Err(Error::shape(format!(
            "{} segmentation maps for {} scales",
            logits.len(),
            targets.seg.len()
        )));
    }
    let mut total = 0.0;
    for (l, s) in logits.iter().zip(&targets.seg) {
        total += dice_loss(&l.mapv(sigmoid), s)?;
    }
    Ok(total / logits.len() as f64)
}

pub fn total_loss(out: &ForwardOutput, targets: &LabelPyramid, weights: LossWeights) -> Result<LossBreakdown> {
    let seg = seg_loss(&out.seg_logits, targets)?;
    let preds: Vec<_> = out.key_maps.iter().map(|k| (k.scale, &k.map)).collect();
    let map = map_loss(&preds, targets)?;
    Ok(LossBreakdown {
        total: seg + weights.lambda * map,
        seg,
        map,
    })
}

fn as_column(values: &Array2<f64>) -> Matrix {
    let flat: Vec<f64> = values.iter().cloned().collect();
    Matrix::from_shape_vec((flat.len(), 1), flat).expect("column")
}

/// Dice loss node for a column of probabilities in row-major grid order.
pub fn dice_loss_graph(g: &mut Graph, probs: Var, target: &BinaryMask) -> Result<Var> {
    let (h, w) = target.dims();
    if g.shape(probs) != (h * w, 1) {
        return Err(Error::shape(format!(
            "prediction {:?} vs {h}x{w} target",
            g.shape(probs)
        )));
    }
    let t_col = as_column(&target.to_f64());
    let t_sum = t_col.sum();
    let t = g.input(t_col);
    let prod = g.mul(probs, t);
    let inter = g.sum(prod);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let p_sum = g.sum(probs);
    let den = g.add_scalar(p_sum, t_sum + DICE_EPS);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean cross-entropy node for a column of probabilities.
pub fn bce_graph(g: &mut Graph, probs: Var, target: &KeyPointMap) -> Result<Var> {
    let (h, w) = target.dims();
    if g.shape(probs) != (h * w, 1) {
        return Err(Error::shape(format!("key map {:?} vs {h}x{w} target", g.shape(probs))));
    }
    let t_col = as_column(target.values());
    let inv_col = t_col.mapv(|t| 1.0 - t);
    let t = g.input(t_col);
    let inv_t = g.input(inv_col);
    let p = g.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = g.ln(p);
    let neg_p = g.scale(p, -1.0);
    let q = g.add_scalar(neg_p, 1.0);
    let log_q = g.ln(q);
    let a = g.mul(t, log_p);
    let b = g.mul(inv_t, log_q);
    let ll = g.add(a, b);
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

/// Loss nodes of one forward pass.
pub struct LossVars {
    pub total: Var,
    pub seg: Var,
    pub map: Option<Var>,
}

pub fn total_loss_graph(
    g: &mut Graph,
    out: &ForwardVars,
    targets: &LabelPyramid,
    weights: LossWeights,
) -> Result<LossVars> {
    if out.seg_logits.len() != targets.seg.len() || out.key_maps.len() > targets.keypoints.len() {
        return Err(Error::shape("forward output and label pyramid disagree on scales"));
    }
    let mut seg_terms = Vec::with_capacity(out.seg_logits.len());
    for (&logits, target) in out.seg_logits.iter().zip(&targets.seg) {
        let p = g.sigmoid(logits);
        seg_terms.push(dice_loss_graph(g, p, target)?);
    }
    let seg_all = g.concat_cols(&seg_terms);
    let seg = g.mean(seg_all);

    let mut map_terms = Vec::new();
    for (maps, target) in out.key_maps.iter().zip(&targets.keypoints) {
        for &m in maps {
            map_terms.push(bce_graph(g, m, target)?);
        }
    }
    let map = (!map_terms.is_empty()).then(|| {
        let all = g.concat_cols(&map_terms);
        g.mean(all)
    });
    let total = match map {
        Some(m) => {
            let weighted = g.scale(m, weights.lambda);
            g.add(seg, weighted)
        }
        None => seg,
    };
    Ok(LossVars { total, seg, map })
}
