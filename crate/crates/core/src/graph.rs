//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! Each forward pass builds a fresh tape of [`Node`]s; [`Graph::backward`]
//! walks it once in reverse. Values are `ndarray::Array2` so matrix products
//! hit the fast `dot` path. Higher-rank data (images) is carried as
//! `(channels, height*width)` with the spatial geometry stored in the op.
//!
//! Parameters live in a [`ParamStore`] keyed by path-like names; binding the
//! same name twice in one graph returns the same node, so weight sharing
//! across batch items falls out of the binding cache.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::num::Scalar;

pub type NodeId = usize;

/// Named parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(bound = "")]
pub struct ParamStore<F: Scalar> {
    map: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Merge `other` under a name prefix.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore<F>) {
        for (name, value) in other.map {
            self.map.insert(format!("{prefix}.{name}"), value);
        }
    }

    /// Dense init: entries ~ N(0, scale^2).
    pub fn init_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) {
        let arr = Array2::from_shape_fn((rows, cols), |_| {
            F::standard_normal(rng) * F::from_f64(scale)
        });
        self.insert(name, arr);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }
}

/// Geometry of a 2-D convolution carried alongside the flattened tensors.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<F: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    /// (r,c) + (r,1) broadcast across columns.
    AddBroadcastCol(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// (r,c) * (r,1) broadcast across columns.
    MulBroadcastCol(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    /// Softmax along each row.
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        src: NodeId,
        start: usize,
        end: usize,
        src_rows: usize,
    },
    /// Depthwise causal convolution along columns: y[c,i] = sum_l k[c,l] x[c,i-l].
    CausalConv {
        x: NodeId,
        k: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        spec: Conv2dSpec,
        cols: Array2<F>,
    },
    /// Adaptive average pooling over columns to a fixed output width.
    AvgPoolCols {
        x: NodeId,
        segments: Vec<(usize, usize)>,
    },
    /// Per-column layer norm over rows, with gain and shift (r,1).
    LayerNormCols {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
    },
}

struct Node<F: Scalar> {
    value: Array2<F>,
    op: Op<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    bindings: HashMap<String, NodeId>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id].value;
        (v.nrows(), v.ncols())
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        self.nodes[id].value[(0, 0)]
    }

    /// Constant input (no gradient consumer reads it, but one is computed).
    pub fn leaf(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Bind a named parameter; repeated binds return the cached node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> NodeId {
        if let Some(&id) = self.bindings.get(name) {
            return id;
        }
        let id = self.push(store.get(name).clone(), Op::Leaf);
        self.bindings.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_broadcast_col(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[bias].value.ncols(), 1);
        let b = self.nodes[bias].value.column(0).to_owned();
        let mut v = self.nodes[a].value.clone();
        for mut col in v.columns_mut() {
            col += &b;
        }
        self.push(v, Op::AddBroadcastCol(a, bias))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn mul_broadcast_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[col].value.ncols(), 1);
        let b = self.nodes[col].value.column(0).to_owned();
        let mut v = self.nodes[a].value.clone();
        for mut c in v.columns_mut() {
            c *= &b;
        }
        self.push(v, Op::MulBroadcastCol(a, col))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: F) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let v = self.nodes[a].value.mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    /// x * sigmoid(x), the smooth gate used where ReLU kinks would upset
    /// finite-difference checks.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = F::from_f64((self.nodes[a].value.len()) as f64);
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let sums = self.nodes[a].value.sum_axis(Axis(1));
        let v = sums.insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0]].value.ncols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, end: usize) -> NodeId {
        let src_rows = self.nodes[src].value.nrows();
        let v = self.nodes[src].value.slice(s![start..end, ..]).to_owned();
        self.push(
            v,
            Op::SliceRows {
                src,
                start,
                end,
                src_rows,
            },
        )
    }

    pub fn causal_conv(&mut self, x: NodeId, k: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let kv = &self.nodes[k].value;
        debug_assert_eq!(xv.dim(), kv.dim());
        let (c, w) = xv.dim();
        let mut v = Array2::zeros((c, w));
        for ch in 0..c {
            for i in 0..w {
                let mut acc = F::zero();
                for l in 0..=i {
                    acc = acc + kv[(ch, l)] * xv[(ch, i - l)];
                }
                v[(ch, i)] = acc;
            }
        }
        self.push(v, Op::CausalConv { x, k })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: Conv2dSpec) -> NodeId {
        let cols = im2col(&self.nodes[x].value, &spec);
        let v = self.nodes[w].value.dot(&cols);
        self.push(v, Op::Conv2d { x, w, spec, cols })
    }

    pub fn avg_pool_cols(&mut self, x: NodeId, out_cols: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let (r, c) = xv.dim();
        let segments: Vec<(usize, usize)> = (0..out_cols)
            .map(|j| {
                let start = j * c / out_cols;
                let end = ((j + 1) * c).div_ceil(out_cols).max(start + 1).min(c);
                (start, end)
            })
            .collect();
        let mut v = Array2::zeros((r, out_cols));
        for (j, &(start, end)) in segments.iter().enumerate() {
            let n = F::from_f64((end - start) as f64);
            let seg = xv.slice(s![.., start..end]).sum_axis(Axis(1));
            v.column_mut(j).assign(&(seg / n));
        }
        self.push(v, Op::AvgPoolCols { x, segments })
    }

    pub fn layer_norm_cols(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = F::from_f64(1e-5);
        let xv = &self.nodes[x].value;
        let g = self.nodes[gamma].value.column(0).to_owned();
        let b = self.nodes[beta].value.column(0).to_owned();
        let (r, c) = xv.dim();
        let n = F::from_f64(r as f64);
        let mut v = Array2::zeros((r, c));
        for j in 0..c {
            let col = xv.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for i in 0..r {
                v[(i, j)] = (col[i] - mean) * inv * g[i] + b[i];
            }
        }
        self.push(
            v,
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Mean squared error between two same-shape nodes, as a (1,1) node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse pass from a (1,1) loss node. Returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Gradients<F> {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), F::one()));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: NodeId, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let add_to = |grads: &mut [Option<Array2<F>>], p: NodeId, delta: Array2<F>| {
            match &mut grads[p] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddBroadcastCol(a, bias) => {
                add_to(grads, *a, g.clone());
                let db = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(grads, *bias, db);
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[*b].value);
                add_to(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g / bv);
                let av = &self.nodes[*a].value;
                add_to(grads, *b, g.mapv(|e| -e) * av / (bv * bv));
            }
            Op::MulBroadcastCol(a, col) => {
                let b = self.nodes[*col].value.column(0).to_owned();
                let mut da = g.clone();
                for mut c in da.columns_mut() {
                    c *= &b;
                }
                add_to(grads, *a, da);
                let prod = g * &self.nodes[*a].value;
                add_to(grads, *col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MatMul(a, b) => {
                add_to(grads, *a, g.dot(&self.nodes[*b].value.t()));
                add_to(grads, *b, self.nodes[*a].value.t().dot(g));
            }
            Op::Scale(a, k) => add_to(grads, *a, g.mapv(|e| e * *k)),
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| {
                    if x > F::zero() {
                        F::one()
                    } else {
                        F::zero()
                    }
                });
                add_to(grads, *a, g * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, *a, g * &y.mapv(|e| F::one() - e * e));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, *a, g * &y.mapv(|e| e * (F::one() - e)));
            }
            Op::Exp(a) => add_to(grads, *a, g * &self.nodes[id].value),
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut dx = g * y;
                for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    for (r, &ye) in row.iter_mut().zip(yrow.iter()) {
                        *r = *r - ye * dot;
                    }
                }
                add_to(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let shape = self.nodes[*a].value.dim();
                add_to(grads, *a, Array2::from_elem(shape, g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let shape = self.nodes[*a].value.dim();
                let n = F::from_f64((self.nodes[*a].value.len()) as f64);
                add_to(grads, *a, Array2::from_elem(shape, g[(0, 0)] / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.nodes[*a].value.dim();
                let mut dx = Array2::zeros((r, c));
                for i in 0..r {
                    let gi = g[(i, 0)];
                    dx.row_mut(i).fill(gi);
                }
                add_to(grads, *a, dx);
            }
            Op::Transpose(a) => add_to(grads, *a, g.t().to_owned()),
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    add_to(grads, p, g.slice(s![at..at + rows, ..]).to_owned());
                    at += rows;
                }
            }
            Op::SliceRows {
                src,
                start,
                end,
                src_rows,
            } => {
                let mut dx = Array2::zeros((*src_rows, g.ncols()));
                dx.slice_mut(s![*start..*end, ..]).assign(g);
                add_to(grads, *src, dx);
            }
            Op::CausalConv { x, k } => {
                let xv = &self.nodes[*x].value;
                let kv = &self.nodes[*k].value;
                let (c, w) = xv.dim();
                let mut dx = Array2::zeros((c, w));
                let mut dk = Array2::zeros((c, w));
                for ch in 0..c {
                    for i in 0..w {
                        let gi = g[(ch, i)];
                        for l in 0..=i {
                            dk[(ch, l)] = dk[(ch, l)] + gi * xv[(ch, i - l)];
                            dx[(ch, i - l)] = dx[(ch, i - l)] + gi * kv[(ch, l)];
                        }
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *k, dk);
            }
            Op::Conv2d { x, w, spec, cols } => {
                let dw = g.dot(&cols.t());
                let dcols = self.nodes[*w].value.t().dot(g);
                let dx = col2im(&dcols, spec);
                add_to(grads, *w, dw);
                add_to(grads, *x, dx);
            }
            Op::AvgPoolCols { x, segments } => {
                let (r, c) = self.nodes[*x].value.dim();
                let mut dx = Array2::zeros((r, c));
                for (j, &(start, end)) in segments.iter().enumerate() {
                    let n = F::from_f64((end - start) as f64);
                    for i in 0..r {
                        let share = g[(i, j)] / n;
                        for col in start..end {
                            dx[(i, col)] = dx[(i, col)] + share;
                        }
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = &self.nodes[*x].value;
                let gam = self.nodes[*gamma].value.column(0).to_owned();
                let (r, c) = xv.dim();
                let n = F::from_f64(r as f64);
                let mut dx = Array2::zeros((r, c));
                let mut dgamma = Array2::zeros((r, 1));
                let mut dbeta = Array2::zeros((r, 1));
                for j in 0..c {
                    let col = xv.column(j);
                    let mean = col.sum() / n;
                    let var = col.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / n;
                    let inv = F::one() / (var + *eps).sqrt();
                    let xhat: Vec<F> = col.iter().map(|&e| (e - mean) * inv).collect();
                    let dy: Vec<F> = (0..r).map(|i| g[(i, j)]).collect();
                    let mut dxhat = vec![F::zero(); r];
                    for i in 0..r {
                        dgamma[(i, 0)] = dgamma[(i, 0)] + dy[i] * xhat[i];
                        dbeta[(i, 0)] = dbeta[(i, 0)] + dy[i];
                        dxhat[i] = dy[i] * gam[i];
                    }
                    let mean_dxhat = dxhat.iter().copied().sum::<F>() / n;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<F>()
                        / n;
                    for i in 0..r {
                        dx[(i, j)] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
        }
    }

    /// Check every node value for NaN/inf; used after sampling steps.
    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.nodes[id].value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Gradients for every parameter bound into this graph, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<F>) -> IndexMap<String, Array2<F>> {
        let mut out = IndexMap::new();
        let mut names: Vec<&String> = self.bindings.keys().collect();
        names.sort();
        for name in names {
            let id = self.bindings[name];
            let shape = self.nodes[id].value.dim();
            let g = grads.grads[id]
                .clone()
                .unwrap_or_else(|| Array2::zeros(shape));
            out.insert(name.clone(), g);
        }
        out
    }
}

pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Array2<F>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn im2col<F: Scalar>(x: &Array2<F>, spec: &Conv2dSpec) -> Array2<F> {
    let (oh, ow) = (spec.out_height(), spec.out_width());
    let k = spec.kernel;
    let mut cols = Array2::zeros((spec.in_channels * k * k, oh * ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let col_idx = oy * ow + ox;
            for c in 0..spec.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < spec.height
                            && (ix as usize) < spec.width
                        {
                            let row = c * k * k + ky * k + kx;
                            cols[(row, col_idx)] = x[(c, iy as usize * spec.width + ix as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(dcols: &Array2<F>, spec: &Conv2dSpec) -> Array2<F> {
    let (oh, ow) = (spec.out_height(), spec.out_width());
    let k = spec.kernel;
    let mut dx = Array2::zeros((spec.in_channels, spec.height * spec.width));
    for oy in 0..oh {
        for ox in 0..ow {
            let col_idx = oy * ow + ox;
            for c in 0..spec.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy >= 0
                            && ix >= 0
                            && (iy as usize) < spec.height
                            && (ix as usize) < spec.width
                        {
                            let row = c * k * k + ky * k + kx;
                            let idx = (c, iy as usize * spec.width + ix as usize);
                            dx[idx] = dx[idx] + dcols[(row, col_idx)];
                        }
                    }
                }
            }
        }
    }
    dx
}
