//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParameterStore`] rather than copied, so many tapes can
//! run concurrently against one read-only store. [`Tape::backward`] returns
//! [`Gradients`] indexed like the store.

use std::collections::HashMap;

use crate::params::{Gradients, ParameterStore};
use crate::tensor::{dot, matmul_into, Tensor, DEFAULT_EPS_GUARD};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Operation with a hand-written backward rule, for fused kernels that are
/// awkward to express through the built-in ops.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient for each input, given the gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Silu(NodeId),
    Exp(NodeId),
    NormalizeRows { input: NodeId, norms: Vec<f64>, guard: f64 },
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SumAll(NodeId),
    Gather { input: NodeId, index: Vec<usize> },
    LogSumExpRows { input: NodeId, exclude: Option<Vec<usize>> },
    MaxOffDiagRows { input: NodeId, argmax: Vec<usize> },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => &self.store.entry(*i).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "not a scalar node");
        v.data()[0]
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self.store.index_of(name)?;
        if let Some(&id) = self.params.get(&idx) {
            return Ok(id);
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b)).expect("matmul_bt shapes");
        self.push(v, Op::MatMulBt(a, b))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "{what}: {:?} vs {:?}", x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |p, q| p + q, "add");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |p, q| p - q, "sub");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |p, q| p * q, "mul");
        self.push(v, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: NodeId, row: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(row));
        assert!(
            r.rows() == 1 && r.cols() == x.cols(),
            "row broadcast {:?} with {:?}",
            x.shape(),
            r.shape()
        );
        let c = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, r.data()[i % c]);
        }
        out
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.row_broadcast(a, row, |p, q| p + q);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` element-wise by a `1×d` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.row_broadcast(a, row, |p, q| p * q);
        self.push(v, Op::MulRow(a, row))
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies `a` by the value of the scalar node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = self.map(a, |x| x * sv);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Row-wise `x / max(‖x‖₂, eps_guard)`.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.normalize_rows_guarded(a, DEFAULT_EPS_GUARD)
    }

    pub fn normalize_rows_guarded(&mut self, a: NodeId, guard: f64) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = dot(x.row(i), x.row(i)).sqrt();
            norms.push(n);
            let d = n.max(guard);
            out.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        self.push(
            out,
            Op::NormalizeRows {
                input: a,
                norms,
                guard,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::matrix(rows, c, data).unwrap();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let c = x.cols();
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let v = Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec()).unwrap();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), r, "concat_cols row mismatch");
            let c = v.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let r = x.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(r, len, data).unwrap();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Picks `a[i, index[i]]` for every row, giving an `n×1` column.
    pub fn gather(&mut self, a: NodeId, index: &[usize]) -> NodeId {
        let x = self.value(a);
        assert_eq!(index.len(), x.rows(), "gather index length");
        let data = index.iter().enumerate().map(|(i, &j)| x.get(i, j)).collect();
        let v = Tensor::matrix(index.len(), 1, data).unwrap();
        self.push(
            v,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
        )
    }

    /// Row-wise log-sum-exp, optionally leaving out column `exclude[i]` of row `i`.
    pub fn logsumexp_rows(&mut self, a: NodeId, exclude: Option<&[usize]>) -> NodeId {
        let x = self.value(a);
        if let Some(ex) = exclude {
            assert_eq!(ex.len(), x.rows(), "exclude length");
        }
        let data = (0..x.rows())
            .map(|i| {
                let skip = exclude.map(|e| e[i]);
                logsumexp(x.row(i), skip)
            })
            .collect();
        let v = Tensor::matrix(x.rows(), 1, data).unwrap();
        self.push(
            v,
            Op::LogSumExpRows {
                input: a,
                exclude: exclude.map(<[usize]>::to_vec),
            },
        )
    }

    /// For a square matrix, `max_{j≠i} a[i,j]` per row (first maximiser wins ties).
    pub fn max_offdiag_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = x.rows();
        assert!(n >= 2 && x.cols() == n, "max_offdiag_rows needs a square matrix with n ≥ 2");
        let mut argmax = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = usize::MAX;
            let mut bv = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i && (best == usize::MAX || x.get(i, j) > bv) {
                    best = j;
                    bv = x.get(i, j);
                }
            }
            argmax.push(best);
            data.push(bv);
        }
        let v = Tensor::matrix(n, 1, data).unwrap();
        self.push(v, Op::MaxOffDiagRows { input: a, argmax })
    }

    pub fn custom(&mut self, inputs: Vec<NodeId>, output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(output, Op::Custom { inputs, op })
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// that participated in the forward pass.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.store.len());

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let y = self.value(NodeId(id));
            match &node.op {
                Op::Constant => {}
                Op::Param(i) => out.add(*i, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_bt(bv).unwrap());
                    let mut gb = vec![0.0; bv.len()];
                    matmul_into(av.transpose().data(), g.data(), &mut gb, av.cols(), av.rows(), g.cols());
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(bv).unwrap());
                    acc(&mut grads, *b, g.transpose().matmul(av).unwrap());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, map(&g, |v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, zip(&g, bv, |p, q| p * q));
                    acc(&mut grads, *b, zip(&g, av, |p, q| p * q));
                }
                Op::AddRow(a, r) => {
                    let rv = self.value(*r);
                    acc(&mut grads, *r, column_sums(&g, rv));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    let c = rv.cols();
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= rv.data()[i % c];
                    }
                    acc(&mut grads, *r, column_sums(&zip(&g, av, |p, q| p * q), rv));
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, map(&g, |v| v * s)),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    let av = self.value(*a);
                    let gs = dot(g.data(), av.data());
                    acc(&mut grads, *s, Tensor::scalar(gs));
                    acc(&mut grads, *a, map(&g, |v| v * sv));
                }
                Op::Abs(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, zip(&g, av, |p, x| p * sign(x)));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, zip(&g, av, |p, x| if x > 0.0 { p } else { 0.0 }));
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        zip(&g, av, |p, x| {
                            let s = sigmoid(x);
                            p * s * (1.0 + x * (1.0 - s))
                        }),
                    );
                }
                Op::Exp(a) => acc(&mut grads, *a, zip(&g, y, |p, e| p * e)),
                Op::NormalizeRows { input, norms, guard } => {
                    let mut gx = g.clone();
                    for (i, &n) in norms.iter().enumerate() {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let row = gx.row_mut(i);
                        if n >= *guard {
                            let proj = dot(gy, yr);
                            for ((o, gv), yv) in row.iter_mut().zip(gy).zip(yr) {
                                *o = (gv - yv * proj) / n;
                            }
                        } else {
                            row.iter_mut().for_each(|o| *o /= guard);
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::SoftmaxRows(a) => {
                    let mut gx = g.clone();
                    for i in 0..y.rows() {
                        let s = dot(g.row(i), y.row(i));
                        let yr = y.row(i);
                        for (o, yv) in gx.row_mut(i).iter_mut().zip(yr) {
                            *o = yv * (*o - s);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let part = Tensor::matrix(r, c, g.data()[off * c..(off + r) * c].to_vec()).unwrap();
                        acc(&mut grads, *p, part);
                        off += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        let mut part = Tensor::zeros(&[g.rows(), pc]);
                        for i in 0..g.rows() {
                            part.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        acc(&mut grads, *p, part);
                        off += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.shape());
                    let len = g.cols();
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(av.shape(), g.data()[0]));
                }
                Op::Gather { input, index } => {
                    let av = self.value(*input);
                    let mut ga = Tensor::zeros(av.shape());
                    for (i, &j) in index.iter().enumerate() {
                        ga.set(i, j, g.data()[i]);
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::LogSumExpRows { input, exclude } => {
                    let av = self.value(*input);
                    let mut ga = Tensor::zeros(av.shape());
                    for i in 0..av.rows() {
                        let skip = exclude.as_ref().map(|e| e[i]);
                        let lse = y.data()[i];
                        let gi = g.data()[i];
                        for (j, (o, x)) in ga.row_mut(i).iter_mut().zip(av.row(i)).enumerate() {
                            if Some(j) != skip {
                                *o = gi * (x - lse).exp();
                            }
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::MaxOffDiagRows { input, argmax } => {
                    let av = self.value(*input);
                    let mut ga = Tensor::zeros(av.shape());
                    for (i, &j) in argmax.iter().enumerate() {
                        ga.set(i, j, g.data()[i]);
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let gs = op.backward(&vals, y, &g);
                    assert_eq!(gs.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                    for (inp, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            acc(&mut grads, *inp, gi);
                        }
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            debug_assert!(existing.same_shape(&g));
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect(),
    )
    .unwrap()
}

fn column_sums(g: &Tensor, like: &Tensor) -> Tensor {
    let c = like.cols();
    let mut out = vec![0.0; c];
    for (i, v) in g.data().iter().enumerate() {
        out[i % c] += v;
    }
    Tensor::new(like.shape().to_vec(), out).unwrap()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64], skip: Option<usize>) -> f64 {
    let it = || row.iter().enumerate().filter(|(j, _)| Some(*j) != skip).map(|(_, v)| *v);
    let mx = it().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
