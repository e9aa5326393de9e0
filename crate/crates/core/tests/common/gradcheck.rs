//! Central finite-difference checks of the boundary learners, the objective and the
//! assembled model. Each function returns the worst relative error it observed.

#![allow(dead_code)]

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbound::attention::Weighting;
use xbound::autograd::{Graph, Matrix, ParamBuilder, ParamId, ParamStore, Var};
use xbound::learners::{ExBoundBlock, ImBoundBlock, XBoundFuse};
use xbound::network::{ModelConfig, XBoundFormer};
use xbound::objectives::{build_label_pyramid, total_loss_graph, LabelPyramid};
use xbound::{BinaryMask, LossWeights};

const STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so entries with vanishing gradient are
/// compared absolutely.
const FLOOR: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `sum(x * w)` for a fixed random `w`, so every output entry reaches the loss.
fn readout(g: &mut Graph, x: Var, w: &Matrix) -> Var {
    let w = g.input(w.clone());
    let p = g.mul(x, w);
    g.sum(p)
}

/// Largest relative error between analytic and central-difference gradients.
fn max_rel_error(store: &mut ParamStore, entries: &[(ParamId, usize)], build: &dyn Fn(&mut Graph) -> Var) -> f64 {
    let grads = {
        let mut g = Graph::new(store);
        let l = build(&mut g);
        g.backward(l)
    };
    let value = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for &(id, idx) in entries {
        let cols = store.get(id).ncols();
        let (r, c) = (idx / cols, idx % cols);
        let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
        let orig = store.get(id)[[r, c]];
        store.get_mut(id)[[r, c]] = orig + STEP;
        let plus = value(store);
        store.get_mut(id)[[r, c]] = orig - STEP;
        let minus = value(store);
        store.get_mut(id)[[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    worst
}

fn all_entries(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect()
}

pub fn im_bound_error(seed: u64, stride: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = ImBoundBlock::new(&mut ParamBuilder::new(&mut store, seed), "im", 8, 2, (4, 4), stride).unwrap();
    let z = store.add("input.z", random(&mut rng, 16, 8));
    let (wf, wm) = (random(&mut rng, 16, 8), random(&mut rng, 16, 1));
    let entries = all_entries(&store);
    max_rel_error(&mut store, &entries, &|g| {
        let zv = g.param(z);
        let out = block.forward(g, zv).unwrap();
        let a = readout(g, out.features, &wf);
        let b = readout(g, out.key_map, &wm);
        g.add(a, b)
    })
}

pub fn ex_bound_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = ExBoundBlock::new(&mut ParamBuilder::new(&mut store, seed), "ex", 8, 2, 16).unwrap();
    let z = store.add("input.z", random(&mut rng, 16, 8));
    let xi = store.add("input.xi", random(&mut rng, 1, 8));
    let (wf, we, wm) = (random(&mut rng, 16, 8), random(&mut rng, 1, 8), random(&mut rng, 16, 1));
    let entries = all_entries(&store);
    max_rel_error(&mut store, &entries, &|g| {
        let (zv, xv) = (g.param(z), g.param(xi));
        let out = block.forward(g, zv, xv).unwrap();
        let a = readout(g, out.features, &wf);
        let b = readout(g, out.embedding, &we);
        let c = readout(g, out.key_map, &wm);
        let ab = g.add(a, b);
        g.add(ab, c)
    })
}

pub fn x_bound_error(seed: u64, weighting: Weighting) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fuse = XBoundFuse::new(
        &mut ParamBuilder::new(&mut store, seed),
        "x",
        4,
        8,
        2,
        2,
        (4, 4),
        weighting,
    )
    .unwrap();
    let f_low = store.add("input.f_low", random(&mut rng, 16, 4));
    let f_high = store.add("input.f_high", random(&mut rng, 4, 8));
    let xi_low = store.add("input.xi_low", random(&mut rng, 1, 4));
    let xi_high = store.add("input.xi_high", random(&mut rng, 1, 8));
    let w = random(&mut rng, 16, 4);
    let entries = all_entries(&store);
    max_rel_error(&mut store, &entries, &|g| {
        let (a, b, c, d) = (g.param(f_low), g.param(xi_low), g.param(f_high), g.param(xi_high));
        let out = fuse.forward(g, a, b, c, d).unwrap();
        readout(g, out.fused, &w)
    })
}

/// Total loss over 8x8 logits at the finest scale (coarser scales scaled down), with
/// two key-point maps per scale.
pub fn total_loss_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = BinaryMask::from_fn(32, 32, |r, c| {
        let (dy, dx) = (r as f64 - 15.5, c as f64 - 13.0);
        dy * dy + dx * dx < 90.0
    });
    let labels: LabelPyramid = build_label_pyramid(&mask, 2, 3).unwrap();
    let mut store = ParamStore::new();
    let mut logits = Vec::new();
    let mut maps = Vec::new();
    for l in 0..4 {
        let n = (8 >> l) * (8 >> l);
        logits.push(store.add(format!("logits{l}"), random(&mut rng, n, 1).mapv(|v| 2.0 * v)));
        maps.push(
            (0..2)
                .map(|b| {
                    store.add(
                        format!("map{l}.{b}"),
                        Matrix::from_shape_fn((n, 1), |_| rng.random_range(0.05..0.95)),
                    )
                })
                .collect::<Vec<_>>(),
        );
    }
    let entries = all_entries(&store);
    max_rel_error(&mut store, &entries, &|g| {
        let vars = xbound::network::ForwardVars {
            seg_logits: logits.iter().map(|&id| g.param(id)).collect(),
            key_maps: maps
                .iter()
                .map(|ids| ids.iter().map(|&id| g.param(id)).collect())
                .collect(),
            embeddings: vec![None; 4],
            encoded: Vec::new(),
            learned: Vec::new(),
            fused: Vec::new(),
        };
        total_loss_graph(g, &vars, &labels, LossWeights::default())
            .unwrap()
            .total
    })
}

/// Full model loss on a 32x32 micro configuration, checked on `samples` random scalar
/// parameters.
pub fn micro_model_error(seed: u64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = XBoundFormer::new(ModelConfig::micro(), seed).unwrap();
    let image = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.0..1.0));
    let mask = BinaryMask::from_fn(32, 32, |r, c| (6..22).contains(&r) && (9..25).contains(&c));
    let labels = build_label_pyramid(&mask, 2, 5).unwrap();
    let mut entries = all_entries(&model.params);
    entries.shuffle(&mut rng);
    entries.truncate(samples);
    let structure = model.clone();
    max_rel_error(&mut model.params, &entries, &|g| {
        let vars = structure.forward_graph(g, &image).unwrap();
        total_loss_graph(g, &vars, &labels, LossWeights::default())
            .unwrap()
            .total
    })
}
