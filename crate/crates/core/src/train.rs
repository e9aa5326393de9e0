//! Decoupled-weight-decay Adam and mini-batch training steps.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::network::XBoundFormer;
use crate::objectives::{total_loss_graph, LabelPyramid, LossBreakdown, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, v)| Matrix::zeros(v.dim())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bias1) / ((*v / bias2).sqrt() + c.eps);
                    *p -= c.lr * (update + c.weight_decay * *p);
                });
        }
    }
}

/// One training example with its precomputed label pyramid.
pub struct TrainItem<'a> {
    pub image: &'a Array3<f64>,
    pub labels: &'a LabelPyramid,
}

/// Mean loss and gradients over a batch.
pub fn batch_gradients(
    model: &XBoundFormer,
    batch: &[TrainItem],
    weights: LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::empty(&model.params);
    let mut loss = LossBreakdown {
        total: 0.0,
        seg: 0.0,
        map: 0.0,
    };
    for item in batch {
        let mut g = Graph::new(&model.params);
        let vars = model.forward_graph(&mut g, item.image)?;
        let l = total_loss_graph(&mut g, &vars, item.labels, weights)?;
        let total = g.scalar(l.total);
        if !total.is_finite() {
            return Err(Error::Numeric("training loss".into()));
        }
        loss.total += scale * total;
        loss.seg += scale * g.scalar(l.seg);
        loss.map += scale * l.map.map_or(0.0, |m| g.scalar(m));
        grads.accumulate(&g.backward(l.total), scale);
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("gradients".into()));
    }
    Ok((loss, grads))
}

/// Computes batch gradients and applies one optimizer update.
pub fn train_step(
    model: &mut XBoundFormer,
    optimizer: &mut AdamW,
    batch: &[TrainItem],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(model, batch, weights)?;
    optimizer.update(&mut model.params, &grads);
    Ok(loss)
}
