//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node in a tape.
//! Parameters live outside the tape in a [`ParamStore`], so a forward pass only borrows
//! them; [`Graph::backward`] returns one gradient per parameter touched by the pass.
//! Token sequences are `n x C` matrices throughout, one row per token.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Matrix = Array2<f64>;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Seeded parameter initialization into a store.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `fan_in x fan_out` matrix.
    pub fn xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Matrix::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-bound..bound));
        self.store.add(name, value)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid standard deviation");
        let value = Matrix::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng));
        self.store.add(name, value)
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Matrix::from_elem((rows, cols), value))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

/// Per-parameter gradients from one or more backward passes.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn empty(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Adds `other * weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.scaled_add(weight, g),
                    None => *mine = Some(g * weight),
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Sparse linear map between token grids: `out[o] = sum_i w_oi * in[i]`.
///
/// Used for average pooling and bilinear resampling of token sequences.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub rows_in: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    /// Average pooling of an `h x w` grid with square window and stride `stride`.
    pub fn avg_pool(h: usize, w: usize, stride: usize) -> Self {
        assert!(stride >= 1 && h.is_multiple_of(stride) && w.is_multiple_of(stride));
        let (oh, ow) = (h / stride, w / stride);
        let weight = 1.0 / (stride * stride) as f64;
        let taps = (0..oh * ow)
            .map(|o| {
                let (orow, ocol) = (o / ow, o % ow);
                let mut t = Vec::with_capacity(stride * stride);
                for dr in 0..stride {
                    for dc in 0..stride {
                        t.push(((orow * stride + dr) * w + ocol * stride + dc, weight));
                    }
                }
                t
            })
            .collect();
        Self { rows_in: h * w, taps }
    }

    /// Bilinear upsampling of an `h x w` grid by an integer factor, half-pixel aligned
    /// (edge samples are clamped).
    pub fn bilinear_up(h: usize, w: usize, factor: usize) -> Self {
        let (oh, ow) = (h * factor, w * factor);
        let rows = axis_taps(h, oh);
        let cols = axis_taps(w, ow);
        let taps = (0..oh * ow)
            .map(|o| {
                let (orow, ocol) = (o / ow, o % ow);
                let mut t = Vec::with_capacity(4);
                for &(ri, rw) in &rows[orow] {
                    for &(ci, cw) in &cols[ocol] {
                        let weight = rw * cw;
                        if weight != 0.0 {
                            t.push((ri * w + ci, weight));
                        }
                    }
                }
                t
            })
            .collect();
        Self { rows_in: h * w, taps }
    }

    pub fn rows_out(&self) -> usize {
        self.taps.len()
    }

    pub fn apply(&self, input: &Matrix) -> Matrix {
        assert_eq!(input.nrows(), self.rows_in, "resampler input rows");
        let mut out = Matrix::zeros((self.taps.len(), input.ncols()));
        for (o, taps) in self.taps.iter().enumerate() {
            let mut row = out.row_mut(o);
            for &(i, weight) in taps {
                row.scaled_add(weight, &input.row(i));
            }
        }
        out
    }

    fn apply_transpose(&self, grad_out: &Matrix) -> Matrix {
        let mut grad_in = Matrix::zeros((self.rows_in, grad_out.ncols()));
        for (o, taps) in self.taps.iter().enumerate() {
            let g = grad_out.row(o);
            for &(i, weight) in taps {
                grad_in.row_mut(i).scaled_add(weight, &g);
            }
        }
        grad_in
    }
}

/// Linear interpolation taps along one axis for half-pixel aligned resizing.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            let frac = src - lo as f64;
            if hi == lo || frac == 0.0 {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (hi, frac)]
            }
        })
        .collect()
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `n x C` plus a `1 x C` row broadcast over rows.
    AddRow(Var, Var),
    /// `n x C` times a `1 x C` row broadcast over rows.
    MulRow(Var, Var),
    /// `n x C` times an `n x 1` column broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    /// Per-row `(x - mean) / sqrt(var + eps)`.
    Standardize(Var, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Resample(Var, Rc<Resampler>),
    /// `out.flat[i] = in.flat[index[i]]`
    Gather(Var, Rc<Vec<usize>>),
}

struct Node {
    op: Op,
    /// `None` for parameters, whose value stays in the store.
    value: Option<Matrix>,
    needs_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn standardize_rows(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    let c = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-parameter nodes hold values"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() needs a 1x1 node");
        m[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Matrix, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(value),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulBt(a, b), value, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), value, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.push(Op::Div(a, b), value, &[a, b])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row: row must be 1 x C");
        let value = self.value(x) + self.value(row);
        self.push(Op::AddRow(x, row), value, &[x, row])
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "mul_row: row must be 1 x C");
        let value = self.value(x) * self.value(row);
        self.push(Op::MulRow(x, row), value, &[x, row])
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (n, _) = self.shape(x);
        assert_eq!(self.shape(col), (n, 1), "mul_col: column must be n x 1");
        let value = self.value(x) * self.value(col);
        self.push(Op::MulCol(x, col), value, &[x, col])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(Op::Scale(x, factor), value, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x) + offset;
        self.push(Op::AddScalar(x), value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(Op::Sigmoid(x), value, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(Op::Gelu(x), value, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.push(Op::Ln(x), value, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(x, lo, hi), value, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows(x), value, &[x])
    }

    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Var {
        let value = standardize_rows(self.value(x), eps);
        self.push(Op::Standardize(x, eps), value, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(Op::SliceCols(x, start), value, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(Op::ConcatCols(parts.to_vec()), value, parts)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let value = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(Op::Mean(x), value, &[x])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(x);
        assert_eq!(m.len(), rows * cols, "reshape: element count differs");
        let flat: Vec<f64> = m.iter().cloned().collect();
        let value = Matrix::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(Op::Reshape(x), value, &[x])
    }

    pub fn resample(&mut self, x: Var, map: Rc<Resampler>) -> Var {
        let value = map.apply(self.value(x));
        self.push(Op::Resample(x, map), value, &[x])
    }

    /// Arbitrary element rearrangement into a `rows x cols` matrix.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = self.value(x);
        let flat: Vec<f64> = src.iter().cloned().collect();
        let value = Matrix::from_shape_fn((rows, cols), |(r, c)| flat[index[r * cols + c]]);
        self.push(Op::Gather(x, index), value, &[x])
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut send = |v: Var, contribution: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&self.value(*b).t()));
                    send(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulBt(a, b) => {
                    send(*a, g.dot(self.value(*b)));
                    send(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, -&g);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, &g * self.value(*b));
                    send(*b, &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*b, -(&g * av) / (bv * bv));
                    send(*a, &g / bv);
                }
                Op::AddRow(x, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*x, g);
                }
                Op::MulRow(x, row) => {
                    let gx = &g * self.value(*row);
                    let grow = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, grow);
                    send(*x, gx);
                }
                Op::MulCol(x, col) => {
                    let gx = &g * self.value(*col);
                    let gcol = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*col, gcol);
                    send(*x, gx);
                }
                Op::Scale(x, factor) => send(*x, g * *factor),
                Op::AddScalar(x) => send(*x, g),
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    Zip::from(&mut gx).and(y).for_each(|gv, &yv| *gv *= yv * (1.0 - yv));
                    send(*x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv *= gelu_grad(xv));
                    send(*x, gx);
                }
                Op::Ln(x) => send(*x, g / self.value(*x)),
                Op::Clamp(x, lo, hi) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        if xv < *lo || xv > *hi {
                            *gv = 0.0;
                        }
                    });
                    send(*x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|v, &yv| *v -= yv * dot);
                    }
                    send(*x, gx);
                }
                Op::Standardize(x, eps) => {
                    let y = node.value.as_ref().unwrap();
                    let xv = self.value(*x);
                    let c = xv.ncols() as f64;
                    let mut gx = g;
                    for ((mut grow, yrow), xrow) in gx.rows_mut().into_iter().zip(y.rows()).zip(xv.rows()) {
                        let mean = xrow.sum() / c;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = grow.sum() / c;
                        let gy_mean = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = inv * (*gv - g_mean - yv * gy_mean));
                    }
                    send(*x, gx);
                }
                Op::SliceCols(x, start) => {
                    let (n, c) = self.shape(*x);
                    let mut gx = Matrix::zeros((n, c));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        send(p, g.slice(s![.., offset..offset + width]).to_owned());
                        offset += width;
                    }
                }
                Op::Sum(x) => {
                    let gv = g[[0, 0]];
                    send(*x, Matrix::from_elem(self.shape(*x), gv));
                }
                Op::Mean(x) => {
                    let shape = self.shape(*x);
                    let gv = g[[0, 0]] / (shape.0 * shape.1) as f64;
                    send(*x, Matrix::from_elem(shape, gv));
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    send(*x, Matrix::from_shape_vec(shape, flat).unwrap());
                }
                Op::Resample(x, map) => send(*x, map.apply_transpose(&g)),
                Op::Gather(x, index) => {
                    let shape = self.shape(*x);
                    let mut flat = vec![0.0; shape.0 * shape.1];
                    for (&src, &gv) in index.iter().zip(g.iter()) {
                        flat[src] += gv;
                    }
                    send(*x, Matrix::from_shape_vec(shape, flat).unwrap());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` w.r.t. every parameter entry.
    fn check(store: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(store.get(id).dim()));
            for i in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[i];
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let plus = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let minus = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[i];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{i}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 3, 4));
        let b = store.add("b", random(&mut rng, 4, 2));
        let c = store.add("c", random(&mut rng, 3, 4));
        let row = store.add("row", random(&mut rng, 1, 4));
        let col = store.add("col", random(&mut rng, 3, 1));
        check(&mut store, |g| {
            let (a, b, c, row, col) = (g.param(a), g.param(b), g.param(c), g.param(row), g.param(col));
            let ab = g.matmul(a, b);
            let abt = g.matmul_bt(a, c);
            let m = g.mul(a, c);
            let d = g.sub(m, c);
            let r = g.add_row(d, row);
            let r = g.mul_row(r, row);
            let r = g.mul_col(r, col);
            let s = g.sigmoid(r);
            let e = g.gelu(s);
            let st = g.standardize_rows(e, 1e-6);
            let sm = g.softmax_rows(st);
            let cat = g.concat_cols(&[sm, ab]);
            let sl = g.slice_cols(cat, 2, 3);
            let rs = g.reshape(sl, 1, 9);
            let q = g.add_scalar(rs, 2.0);
            let lq = g.ln(q);
            let sq = g.mul(lq, lq);
            let t1 = g.sum(sq);
            let t2 = g.mean(abt);
            let num = g.add(t1, t2);
            let den = g.add_scalar(t1, 3.0);
            g.div(num, den)
        });
    }

    #[test]
    fn resample_and_gather_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, 16, 3));
        let w = store.add("w", random(&mut rng, 64, 3));
        let pool = Rc::new(Resampler::avg_pool(4, 4, 2));
        let up = Rc::new(Resampler::bilinear_up(4, 4, 2));
        let perm: Rc<Vec<usize>> = Rc::new((0..48).rev().collect());
        check(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let p = g.resample(xv, pool.clone());
            let u = g.resample(xv, up.clone());
            let uw = g.mul(u, wv);
            let gathered = g.gather(xv, perm.clone(), 12, 4);
            let gg = g.mul(gathered, gathered);
            let a = g.sum(uw);
            let b = g.sum(p);
            let b2 = g.mul(b, b);
            let c = g.sum(gg);
            let ab = g.add(a, b2);
            g.add(ab, c)
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[-2.0, 0.5, 3.0]]);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let c = g.clamp(xv, 0.0, 1.0);
        let l = g.sum(c);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn avg_pool_averages_windows() {
        let x = Matrix::from_shape_fn((16, 1), |(i, _)| i as f64);
        let pooled = Resampler::avg_pool(4, 4, 2).apply(&x);
        assert_eq!(pooled.column(0).to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn bilinear_up_preserves_constants_and_linear_ramps() {
        let ones = Matrix::ones((9, 2));
        let up = Resampler::bilinear_up(3, 3, 2).apply(&ones);
        assert!(up.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // A column ramp interpolates linearly away from the clamped edges.
        let ramp = Matrix::from_shape_fn((16, 1), |(i, _)| (i % 4) as f64);
        let up = Resampler::bilinear_up(4, 4, 2).apply(&ramp);
        let row: Vec<f64> = (0..8).map(|c| up[[8 + c, 0]]).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn params_are_shared_within_a_graph() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[3.0]]);
        let mut g = Graph::new(&store);
        let a = g.param(x);
        let b = g.param(x);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }
}
