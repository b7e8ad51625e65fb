//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape built during a single forward pass. Parameters live in
//! a [`ParamStore`] borrowed by the tape, so a forward pass never copies
//! weights. [`Graph::backward`] walks the tape once in reverse and returns
//! per-parameter gradients plus gradients for any node created with
//! [`Graph::input`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, trainable weights.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        self.trainable.push(true);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Toggles every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, flag) in self.names.iter().zip(self.trainable.iter_mut()) {
            if name.starts_with(prefix) {
                *flag = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Iterates `(name, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Key range visible to each query row of [`Graph::attention`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    /// Queries may only see keys at or before their own row.
    pub causal: bool,
    /// Maximum number of visible keys (including the query row itself).
    pub lookback: Option<usize>,
    /// Lengths of independent sequences packed into the rows. Empty means one
    /// sequence spanning every row.
    pub segments: Vec<usize>,
}

impl AttnMask {
    pub fn causal(lookback: Option<usize>) -> Self {
        Self {
            causal: true,
            lookback,
            segments: Vec::new(),
        }
    }

    pub fn bidirectional() -> Self {
        Self {
            causal: false,
            lookback: None,
            segments: Vec::new(),
        }
    }

    pub fn with_segments(mut self, segments: Vec<usize>) -> Self {
        self.segments = segments;
        self
    }

    /// Inclusive key range `[lo, hi]` for every query row.
    fn ranges(&self, rows: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(rows);
        let segs: Vec<usize> = if self.segments.is_empty() {
            vec![rows]
        } else {
            self.segments.clone()
        };
        let mut start = 0;
        for len in segs {
            for i in start..start + len {
                let hi = if self.causal { i } else { start + len - 1 };
                let mut lo = start;
                if let Some(lb) = self.lookback {
                    let lb = lb.max(1);
                    if self.causal {
                        lo = lo.max((i + 1).saturating_sub(lb));
                    } else {
                        lo = lo.max(i.saturating_sub(lb - 1));
                    }
                }
                out.push((lo, hi));
            }
            start += len;
        }
        assert_eq!(start, rows, "attention segments do not cover every row");
        out
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        ranges: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    RepeatRows(Var, usize),
    PoolRows(Var, usize),
    MeanSegments(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        x: Var,
        target: Tensor,
        beta: f64,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    StraightThrough(Var),
    External {
        input: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    inputs: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(i, _)| *i == v.0).map(|(_, t)| t)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.params.iter_mut().flatten() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    /// Adds `other` into `self` (gradient accumulation across samples).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn empty(num_params: usize) -> Self {
        Self {
            params: vec![None; num_params],
            inputs: Vec::new(),
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant: gradients stop here.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xt, rt) = (self.value(x), self.value(row));
        assert_eq!(rt.shape(), (1, xt.cols()), "add_row expects 1 x cols");
        let mut out = xt.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rt.row(0)) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, rt.cols());
        self.push(out, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xt, rt) = (self.value(x), self.value(row));
        assert_eq!(rt.shape(), (1, xt.cols()), "mul_row expects 1 x cols");
        let mut out = xt.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rt.row(0)) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    /// Multiplies `x` by a `1 x 1` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "scale_by expects a scalar node");
        let sv = sv.item();
        let out = self.value(x).scale(sv);
        self.push(out, Op::ScaleBy(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Float::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Float::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Float::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (rows, cols) = xt.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
    /// `v` (all `T x d`). Each query row only touches keys inside its mask
    /// range, so a row's output depends on nothing outside that range.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qt.shape();
        assert_eq!(kt.shape(), (rows, d), "attention key shape");
        assert_eq!(vt.shape(), (rows, d), "attention value shape");
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ranges = mask.ranges(rows);
        let mut out = Tensor::zeros(rows, d);
        let mut probs = Vec::with_capacity(rows * heads);
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            for h in 0..heads {
                let qi = &qt.row(i)[h * dh..(h + 1) * dh];
                let mut p: Vec<f64> = (lo..=hi)
                    .map(|j| scale * dot(qi, &kt.row(j)[h * dh..(h + 1) * dh]))
                    .collect();
                let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in p.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in p.iter_mut() {
                    *s /= z;
                }
                let o = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
                for (pj, j) in p.iter().zip(lo..=hi) {
                    let vj = &vt.row(j)[h * dh..(h + 1) * dh];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += pj * vv;
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                ranges,
                probs,
            },
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let mut out = xt.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Picks one column per row, giving a `rows x 1` column.
    pub fn pick(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let xt = self.value(x);
        assert_eq!(cols.len(), xt.rows(), "pick needs one index per row");
        let data = cols.iter().enumerate().map(|(r, &c)| xt.get(r, c)).collect();
        let out = Tensor::from_vec(cols.len(), 1, data);
        self.push(out, Op::Pick(x, cols))
    }

    /// Row lookup (embedding tables).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xt = self.value(x);
        let cols = xt.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(xt.row(i));
        }
        let out = Tensor::from_vec(idx.len(), cols, data);
        self.push(out, Op::GatherRows(x, idx))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&ts);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&ts);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-major reinterpretation, e.g. `N x c` to `N/r x r·c`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshape(rows, cols);
        self.push(out, Op::Reshape(x))
    }

    /// Repeats every row `times` times in place (`n x c` to `n·times x c`).
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xt = self.value(x);
        let cols = xt.cols();
        let mut data = Vec::with_capacity(xt.len() * times);
        for r in 0..xt.rows() {
            for _ in 0..times {
                data.extend_from_slice(xt.row(r));
            }
        }
        let out = Tensor::from_vec(xt.rows() * times, cols, data);
        self.push(out, Op::RepeatRows(x, times))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn pool_rows(&mut self, x: Var, group: usize) -> Var {
        let xt = self.value(x);
        assert!(group >= 1 && xt.rows() % group == 0, "pool_rows group size");
        let n = xt.rows() / group;
        let mut out = Tensor::zeros(n, xt.cols());
        for g in 0..n {
            let o = out.row_mut(g);
            for r in g * group..(g + 1) * group {
                for (oo, v) in o.iter_mut().zip(xt.row(r)) {
                    *oo += v;
                }
            }
            for oo in o.iter_mut() {
                *oo /= group as f64;
            }
        }
        self.push(out, Op::PoolRows(x, group))
    }

    /// Mean over each segment of rows, one output row per segment.
    pub fn mean_segments(&mut self, x: Var, segments: Vec<usize>) -> Var {
        let xt = self.value(x);
        assert_eq!(segments.iter().sum::<usize>(), xt.rows(), "segments cover rows");
        let mut out = Tensor::zeros(segments.len(), xt.cols());
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = out.row_mut(s);
            for r in start..start + len {
                for (oo, v) in o.iter_mut().zip(xt.row(r)) {
                    *oo += v;
                }
            }
            for oo in o.iter_mut() {
                *oo /= len.max(1) as f64;
            }
            start += len;
        }
        self.push(out, Op::MeanSegments(x, segments))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x))
    }

    /// Mean Huber/SmoothL1 loss against a constant target.
    pub fn smooth_l1(&mut self, x: Var, target: Tensor, beta: f64) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.shape(), target.shape(), "smooth_l1 shape");
        let total: f64 = xt
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let out = Tensor::scalar(total / xt.len().max(1) as f64);
        self.push(out, Op::SmoothL1 { x, target, beta })
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    /// Forward value `value`, backward identity into `x`: the straight-through
    /// estimator `x + sg(value - x)`.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Var {
        assert_eq!(self.shape(x), value.shape(), "straight_through shape");
        self.push(value, Op::StraightThrough(x))
    }

    /// A scalar computed outside the tape with its gradient already known:
    /// backward adds `upstream * grad` into `input`.
    pub fn external(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.shape(input), grad.shape(), "external gradient shape");
        self.push(Tensor::scalar(value), Op::External { input, grad })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut inputs = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Input => inputs.push((idx, g)),
                Op::Param(id) => accumulate(&mut params[id.0], g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[x.0], g);
                }
                Op::MulRow(x, row) => {
                    let xt = self.value(*x);
                    let rt = self.value(*row);
                    let mut gr = Tensor::zeros(1, g.cols());
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gr.data_mut()[c] += g.get(r, c) * xt.get(r, c);
                            gx.set(r, c, g.get(r, c) * rt.get(0, c));
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Scale(x, s) => accumulate(&mut grads[x.0], g.scale(*s)),
                Op::ScaleBy(x, s) => {
                    let sv = self.value(*s).item();
                    let gs = dot(g.data(), self.value(*x).data());
                    accumulate(&mut grads[s.0], Tensor::scalar(gs));
                    accumulate(&mut grads[x.0], g.scale(sv));
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gg, v| if v > 0.0 { gg } else { 0.0 });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let gx = g.zip_map(self.value(*x), |gg, v| gg * gelu_grad(v));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let out = self.value(Var(idx));
                    let gx = g.zip_map(out, |gg, t| gg * (1.0 - t * t));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let out = self.value(Var(idx));
                    let gx = g.zip_map(out, |gg, s| gg * s * (1.0 - s));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Exp(x) => {
                    let out = self.value(Var(idx));
                    let gx = g.zip_map(out, |gg, e| gg * e);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Abs(x) => {
                    let gx = g.zip_map(self.value(*x), |gg, v| {
                        if v > 0.0 {
                            gg
                        } else if v < 0.0 {
                            -gg
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Square(x) => {
                    let gx = g.zip_map(self.value(*x), |gg, v| 2.0 * gg * v);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let (rows, cols) = g.shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgx = dot(gr, xr) / cols as f64;
                        for ((o, gv), xv) in gx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                            *o = inv_std[r] * (gv - mg - xv * mgx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    ranges,
                    probs,
                } => {
                    let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qt.shape();
                    let dh = d / heads;
                    let mut gq = Tensor::zeros(rows, d);
                    let mut gk = Tensor::zeros(rows, d);
                    let mut gv = Tensor::zeros(rows, d);
                    for (i, &(lo, hi)) in ranges.iter().enumerate() {
                        for h in 0..*heads {
                            let p = &probs[i * heads + h];
                            let go = &g.row(i)[h * dh..(h + 1) * dh];
                            let gp: Vec<f64> = (lo..=hi)
                                .map(|j| dot(go, &vt.row(j)[h * dh..(h + 1) * dh]))
                                .collect();
                            let s: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                            let qi = &qt.row(i)[h * dh..(h + 1) * dh];
                            for (t, j) in (lo..=hi).enumerate() {
                                let gvj = &mut gv.row_mut(j)[h * dh..(h + 1) * dh];
                                for (o, gg) in gvj.iter_mut().zip(go) {
                                    *o += p[t] * gg;
                                }
                                let gs = p[t] * (gp[t] - s) * scale;
                                let kj = &kt.row(j)[h * dh..(h + 1) * dh];
                                let gqi = &mut gq.row_mut(i)[h * dh..(h + 1) * dh];
                                for (o, kk) in gqi.iter_mut().zip(kj) {
                                    *o += gs * kk;
                                }
                                let gkj = &mut gk.row_mut(j)[h * dh..(h + 1) * dh];
                                for (o, qq) in gkj.iter_mut().zip(qi) {
                                    *o += gs * qq;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::LogSoftmax(x) => {
                    let out = self.value(Var(idx));
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for (o, lp) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                            *o -= lp.exp() * gs;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Pick(x, cols) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    for (r, &col) in cols.iter().enumerate() {
                        gx.set(r, col, g.get(r, 0));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GatherRows(x, idxs) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    for (r, &i) in idxs.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SliceRows(x, start) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    let n = g.len();
                    gx.data_mut()[start * c..start * c + n].copy_from_slice(g.data());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SliceCols(x, start) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        accumulate(&mut grads[p.0], g.slice_rows(start, n));
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        accumulate(&mut grads[p.0], g.slice_cols(start, n));
                        start += n;
                    }
                }
                Op::Reshape(x) => {
                    let (rows, c) = self.shape(*x);
                    accumulate(&mut grads[x.0], g.reshape(rows, c));
                }
                Op::RepeatRows(x, times) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    for r in 0..rows {
                        for t in 0..*times {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(r * times + t)) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::PoolRows(x, group) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    let inv = 1.0 / *group as f64;
                    for r in 0..rows {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MeanSegments(x, segments) => {
                    let (rows, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, c);
                    let mut start = 0;
                    for (s, &len) in segments.iter().enumerate() {
                        let inv = 1.0 / len.max(1) as f64;
                        for r in start..start + len {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o = v * inv;
                            }
                        }
                        start += len;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sum(x) => {
                    let (rows, c) = self.shape(*x);
                    accumulate(&mut grads[x.0], Tensor::full(rows, c, g.item()));
                }
                Op::Mean(x) => {
                    let (rows, c) = self.shape(*x);
                    let n = (rows * c).max(1) as f64;
                    accumulate(&mut grads[x.0], Tensor::full(rows, c, g.item() / n));
                }
                Op::SmoothL1 { x, target, beta } => {
                    let xt = self.value(*x);
                    let n = xt.len().max(1) as f64;
                    let up = g.item();
                    let gx = xt.zip_map(target, |a, b| {
                        let d = a - b;
                        let gd = if d.abs() < *beta {
                            d / beta
                        } else {
                            d.signum()
                        };
                        up * gd / n
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let out = self.value(Var(idx));
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let proj = dot(y, gy);
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o = (gv - yv * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::StraightThrough(x) => accumulate(&mut grads[x.0], g),
                Op::External { input, grad } => {
                    accumulate(&mut grads[input.0], grad.scale(g.item()));
                }
            }
        }
        Gradients { params, inputs }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.input(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.constant(xp);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs().max(a.abs()),
                "entry {i}: finite difference {fd} vs analytic {a}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::randn(rows, cols, 1.0, &mut crate::seeded(seed))
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let w = sample(4, 3, 1);
        check_input_grad(sample(5, 4, 2), |g, x| {
            let w = g.constant(w.clone());
            let y = g.matmul(x, w);
            let a = g.gelu(y);
            let b = g.tanh(a);
            let c = g.sigmoid(b);
            let d = g.square(c);
            let e = g.exp(d);
            g.sum(e)
        });
    }

    #[test]
    fn layer_norm_and_softmax_match_finite_differences() {
        let t = sample(3, 5, 9);
        check_input_grad(sample(3, 5, 4), |g, x| {
            let y = g.layer_norm(x);
            let t = g.constant(t.clone());
            let y = g.mul(y, t);
            let l = g.log_softmax(y);
            let p = g.pick(l, alloc::vec![0, 3, 4]);
            g.mean(p)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mask = AttnMask::causal(Some(3)).with_segments(alloc::vec![4, 2]);
        let wk = sample(4, 4, 11);
        let wv = sample(4, 4, 12);
        check_input_grad(sample(6, 4, 5), move |g, x| {
            let wk = g.constant(wk.clone());
            let wv = g.constant(wv.clone());
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let a = g.attention(x, k, v, 2, &mask);
            let s = g.square(a);
            g.sum(s)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check_input_grad(sample(4, 6, 6), |g, x| {
            let r = g.reshape(x, 8, 3);
            let p = g.pool_rows(r, 2);
            let rep = g.repeat_rows(p, 2);
            let sl = g.slice_cols(rep, 1, 2);
            let sr = g.slice_rows(x, 1, 2);
            let cat = g.concat_rows(&[sl, sl]);
            let gathered = g.gather_rows(sr, alloc::vec![1, 0, 1]);
            let n = g.l2_normalize_rows(gathered);
            let m = g.mean_segments(cat, alloc::vec![5, 11]);
            let q = g.abs(m);
            let s1 = g.sum(q);
            let s2 = g.smooth_l1(n, Tensor::zeros(3, 6), 0.5);
            let s = g.add(s1, s2);
            let scaled = g.scale_by(s, s2);
            g.scale(scaled, 0.7)
        });
    }

    #[test]
    fn causal_lookback_ranges() {
        let m = AttnMask::causal(Some(2));
        assert_eq!(m.ranges(3), alloc::vec![(0, 0), (0, 1), (1, 2)]);
        let b = AttnMask::bidirectional().with_segments(alloc::vec![2, 1]);
        assert_eq!(b.ranges(3), alloc::vec![(0, 1), (0, 1), (2, 2)]);
    }

    #[test]
    fn param_gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap().item(), 6.0);
    }
}
