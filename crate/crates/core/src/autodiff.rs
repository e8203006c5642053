//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations on [`Var`]
//! handles append nodes in topological order, so the backward sweep is a
//! single reverse walk over the node list.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row groups for [`Var::group_mean`]: output row `g` averages input rows `groups[g]`.
#[derive(Clone, Debug)]
pub struct Groups {
    members: Vec<Vec<usize>>,
    source_rows: usize,
}

impl Groups {
    pub fn new(members: Vec<Vec<usize>>, source_rows: usize) -> Result<Self> {
        for (g, m) in members.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Contract(format!("group {g} is empty")));
            }
            if let Some(&bad) = m.iter().find(|&&i| i >= source_rows) {
                return Err(Error::Contract(format!(
                    "group {g} references row {bad} of {source_rows}"
                )));
            }
        }
        Ok(Self {
            members,
            source_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GroupMean { x: usize, groups: Arc<Groups> },
    BceWithLogits { x: usize, target: Rc<Tensor> },
    PickPerRow { x: usize, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Operation record for one forward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().leaf_grads.iter_mut() {
            *g = None;
        }
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        inner.leaf_grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("tape values are matrices")
}

/// Broadcast shape of two matrices: each dimension equal or 1.
fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let r = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        return Err(Error::shape(op, a.shape(), b.shape()));
    };
    let c = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        return Err(Error::shape(op, a.shape(), b.shape()));
    };
    Ok((r, c))
}

#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    (if rows == 1 { 0 } else { i }) * cols + if cols == 1 { 0 } else { j }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    stable_sigmoid(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.with_value(dims)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after one or more [`Var::backward`] calls.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let shape = inner.nodes[self.id].value.shape().to_vec();
        inner.leaf_grads[self.id]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("grad matches value"))
    }

    fn check_tape(&self, other: &Var) {
        assert!(self.tape.same(&other.tape), "vars belong to different tapes");
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let (out, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (f(&n.value)?, n.requires_grad)
        };
        Ok(self.tape.push(out, op, rg))
    }

    fn binary(
        &self,
        other: &Var,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        self.check_tape(other);
        let (out, rg) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            (f(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out, op, rg))
    }

    fn elementwise(
        &self,
        other: &Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.binary(other, op, |a, b| {
            let (r, c) = broadcast(name, a, b)?;
            let (ar, ac) = dims(a);
            let (br, bc) = dims(b);
            let (ad, bd) = (a.data(), b.data());
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(f(ad[bidx(ar, ac, i, j)], bd[bidx(br, bc, i, j)]));
                }
            }
            Tensor::matrix(r, c, out)
        })
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        self.unary(op, |a| Ok(a.map(f))).expect("elementwise map")
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn t(&self) -> Var {
        self.unary(Op::Transpose(self.id), |a| Ok(a.transpose()))
            .expect("transpose")
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn scale(&self, s: f64) -> Var {
        self.map(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.map(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn exp(&self) -> Var {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn sigmoid(&self) -> Var {
        self.map(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn gelu(&self) -> Var {
        self.map(Op::Gelu(self.id), gelu)
    }

    pub fn relu(&self) -> Var {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Max-stabilized softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Contract(format!("softmax axis {axis} out of range")));
        }
        let op = Op::Softmax { x: self.id, axis };
        self.unary(op, |a| {
            let src = if axis == 1 { a.clone() } else { a.transpose() };
            let (r, c) = dims(&src);
            let mut out = src.into_data();
            for row in out.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            let t = Tensor::matrix(r, c, out)?;
            Ok(if axis == 1 { t } else { t.transpose() })
        })
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&self) -> Var {
        self.unary(Op::LogSoftmax(self.id), |a| {
            let (r, c) = dims(a);
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::matrix(r, c, out)
        })
        .expect("log_softmax")
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain`/`bias` (`1×C`).
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm requires eps > 0".into()));
        }
        self.check_tape(gain);
        self.check_tape(bias);
        let (out, xhat, inv_std, rg) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let g = &inner.nodes[gain.id];
            let b = &inner.nodes[bias.id];
            let (r, c) = dims(&x.value);
            if dims(&g.value) != (1, c) || dims(&b.value) != (1, c) {
                return Err(Error::shape("layer_norm", x.value.shape(), g.value.shape()));
            }
            let mut xhat = Vec::with_capacity(r * c);
            let mut inv_std = Vec::with_capacity(r);
            let mut out = Vec::with_capacity(r * c);
            for row in x.value.data().chunks(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * g.value.data()[j] + b.value.data()[j]);
                }
            }
            let rg = x.requires_grad || g.requires_grad || b.requires_grad;
            (Tensor::matrix(r, c, out)?, xhat, inv_std, rg)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(out, op, rg))
    }

    pub fn sum(&self) -> Var {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.data().iter().sum())))
            .expect("sum")
    }

    pub fn mean(&self) -> Var {
        self.unary(Op::Mean(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
        })
        .expect("mean")
    }

    /// Sums along `axis`: 0 gives `1×C`, 1 gives `R×1`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Contract(format!("sum axis {axis} out of range")));
        }
        self.unary(Op::SumAxis { x: self.id, axis }, |a| {
            let (r, c) = dims(a);
            if axis == 0 {
                let mut out = vec![0.0; c];
                for row in a.data().chunks(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, c, out)
            } else {
                let out = a.data().chunks(c).map(|row| row.iter().sum()).collect();
                Tensor::matrix(r, 1, out)
            }
        })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let op = Op::GatherRows {
            x: self.id,
            idx: idx.to_vec(),
        };
        self.unary(op, |a| {
            let (r, c) = dims(a);
            if idx.is_empty() {
                return Err(Error::Contract("gather_rows with no indices".into()));
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(Error::shape("gather_rows", a.shape(), &[i]));
                }
                out.extend_from_slice(a.row(i));
            }
            Tensor::matrix(idx.len(), c, out)
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        self.unary(Op::SliceCols { x: self.id, start }, |a| {
            let (r, c) = dims(a);
            if start >= end || end > c {
                return Err(Error::shape("slice_cols", a.shape(), &[start, end]));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for row in a.data().chunks(c) {
                out.extend_from_slice(&row[start..end]);
            }
            Tensor::matrix(r, w, out)
        })
    }

    /// Averages row groups: output row `g` is the mean of input rows `groups[g]`.
    pub fn group_mean(&self, groups: Arc<Groups>) -> Result<Var> {
        let op = Op::GroupMean {
            x: self.id,
            groups: groups.clone(),
        };
        self.unary(op, |a| {
            let (r, c) = dims(a);
            if r != groups.source_rows {
                return Err(Error::shape("group_mean", a.shape(), &[groups.source_rows]));
            }
            let mut out = vec![0.0; groups.len() * c];
            for (g, m) in groups.members.iter().enumerate() {
                let orow = &mut out[g * c..(g + 1) * c];
                for &i in m {
                    for (o, v) in orow.iter_mut().zip(a.row(i)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / m.len() as f64;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
            Tensor::matrix(groups.len(), c, out)
        })
    }

    /// Elementwise binary cross-entropy of logits against constant targets.
    pub fn bce_with_logits(&self, target: &Tensor) -> Result<Var> {
        let target = Rc::new(target.clone());
        let op = Op::BceWithLogits {
            x: self.id,
            target: target.clone(),
        };
        self.unary(op, |a| {
            if a.shape() != target.shape() {
                return Err(Error::shape("bce_with_logits", a.shape(), target.shape()));
            }
            Ok(Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
                    .collect(),
            )?)
        })
    }

    /// Picks `x[r, idx[r]]` for every row, giving an `R×1` column.
    pub fn pick_per_row(&self, idx: &[usize]) -> Result<Var> {
        let op = Op::PickPerRow {
            x: self.id,
            idx: idx.to_vec(),
        };
        self.unary(op, |a| {
            let (r, c) = dims(a);
            if idx.len() != r || idx.iter().any(|&j| j >= c) {
                return Err(Error::shape("pick_per_row", a.shape(), &[idx.len()]));
            }
            Tensor::matrix(r, 1, (0..r).map(|i| a.at(i, idx[i])).collect())
        })
    }

    /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        let inner = &mut *inner;
        let n = inner.nodes[self.id].value.numel();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[self.id].value.shape()
            )));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        if !nodes[self.id].requires_grad {
            return Ok(());
        }
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                let slot = &mut inner.leaf_grads[id];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            backprop(nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    let (r, c) = dims(y);
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::MatMul(a, b) => {
            let (m, k) = dims(val(*a));
            let n = c;
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · Bᵀ
                let d = matmul_nt_raw(g, val(*b).data(), m, n, k);
                ga.iter_mut().zip(d).for_each(|(x, v)| *x += v);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dC
                let d = matmul_tn_raw(val(*a).data(), g, m, k, n);
                gb.iter_mut().zip(d).for_each(|(x, v)| *x += v);
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (ar, ac) = dims(val(*a));
            let (br, bc) = dims(val(*b));
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let kind = match &node.op {
                Op::Add(..) => 0,
                Op::Sub(..) => 1,
                Op::Mul(..) => 2,
                _ => 3,
            };
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        let gi = g[i * c + j];
                        let bv = bd[bidx(br, bc, i, j)];
                        ga[bidx(ar, ac, i, j)] += match kind {
                            0 | 1 => gi,
                            2 => gi * bv,
                            _ => gi / bv,
                        };
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..r {
                    for j in 0..c {
                        let gi = g[i * c + j];
                        let av = ad[bidx(ar, ac, i, j)];
                        let bv = bd[bidx(br, bc, i, j)];
                        gb[bidx(br, bc, i, j)] += match kind {
                            0 => gi,
                            1 => -gi,
                            2 => gi * av,
                            _ => -gi * av / (bv * bv),
                        };
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, v)| *x += v * s);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
            }
        }
        Op::Exp(a) | Op::Sigmoid(a) => {
            let sig = matches!(node.op, Op::Sigmoid(_));
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gv), yv) in ga.iter_mut().zip(g).zip(y.data()) {
                    *x += if sig { gv * yv * (1.0 - yv) } else { gv * yv };
                }
            }
        }
        Op::Log(a) | Op::Gelu(a) | Op::Relu(a) => {
            let src = val(*a).data();
            let kind = match node.op {
                Op::Log(_) => 0,
                Op::Gelu(_) => 1,
                _ => 2,
            };
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gv), xv) in ga.iter_mut().zip(g).zip(src) {
                    *x += gv
                        * match kind {
                            0 => 1.0 / xv,
                            1 => gelu_grad(*xv),
                            _ => f64::from(u8::from(*xv > 0.0)),
                        };
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let yd = y.data();
                if *axis == 1 {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = g[row.clone()].iter().zip(&yd[row.clone()]).map(|(a, b)| a * b).sum();
                        for k in row {
                            gx[k] += yd[k] * (g[k] - dot);
                        }
                    }
                } else {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| g[i * c + j] * yd[i * c + j]).sum();
                        for i in 0..r {
                            let k = i * c + j;
                            gx[k] += yd[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let yd = y.data();
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let gs: f64 = g[row.clone()].iter().sum();
                    for k in row {
                        gx[k] += g[k] - yd[k].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gd = val(*gain).data();
            if let Some(gg) = acc(grads, nodes, *gain) {
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let cf = c as f64;
                for i in 0..r {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let dh = g[i * c + j] * gd[j];
                        s1 += dh;
                        s2 += dh * xhat[i * c + j];
                    }
                    for j in 0..c {
                        let k = i * c + j;
                        let dh = g[k] * gd[j];
                        gx[k] += inv_std[i] / cf * (cf * dh - s1 - xhat[k] * s2);
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            let n = val(*a).numel();
            let s = if matches!(node.op, Op::Mean(_)) {
                g[0] / n as f64
            } else {
                g[0]
            };
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumAxis { x, axis } => {
            let (xr, xc) = dims(val(*x));
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..xr {
                    for j in 0..xc {
                        gx[i * xc + j] += if *axis == 0 { g[j] } else { g[i] };
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[o * c + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, v)| *x += v);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (_, pc) = dims(val(p));
                if let Some(gp) = acc(grads, nodes, p) {
                    for i in 0..r {
                        for j in 0..pc {
                            gp[i * pc + j] += g[i * c + offset + j];
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::SliceCols { x, start } => {
            let (_, xc) = dims(val(*x));
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * xc + start + j] += g[i * c + j];
                    }
                }
            }
        }
        Op::GroupMean { x, groups } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (gi, m) in groups.members.iter().enumerate() {
                    let inv = 1.0 / m.len() as f64;
                    for &i in m {
                        for j in 0..c {
                            gx[i * c + j] += g[gi * c + j] * inv;
                        }
                    }
                }
            }
        }
        Op::BceWithLogits { x, target } => {
            let xd = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (k, o) in gx.iter_mut().enumerate() {
                    *o += g[k] * (stable_sigmoid(xd[k]) - target.data()[k]);
                }
            }
        }
        Op::PickPerRow { x, idx } => {
            let (_, xc) = dims(val(*x));
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * xc + j] += g[i];
                }
            }
        }
    }
}

fn concat(parts: &[Var], rows: bool) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    for p in parts {
        first.check_tape(p);
    }
    let (out, rg) = {
        let inner = first.tape.inner.borrow();
        let vals: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.id].value).collect();
        let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
        let (r0, c0) = dims(vals[0]);
        let out = if rows {
            let mut data = Vec::new();
            let mut r = 0;
            for v in &vals {
                let (vr, vc) = dims(v);
                if vc != c0 {
                    return Err(Error::shape("concat_rows", vals[0].shape(), v.shape()));
                }
                data.extend_from_slice(v.data());
                r += vr;
            }
            Tensor::matrix(r, c0, data)?
        } else {
            let mut c = 0;
            for v in &vals {
                let (vr, vc) = dims(v);
                if vr != r0 {
                    return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
                }
                c += vc;
            }
            let mut data = Vec::with_capacity(r0 * c);
            for i in 0..r0 {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            Tensor::matrix(r0, c, data)?
        };
        (out, rg)
    };
    let ids = parts.iter().map(|p| p.id).collect();
    let op = if rows {
        Op::ConcatRows(ids)
    } else {
        Op::ConcatCols(ids)
    };
    Ok(first.tape.push(out, op, rg))
}

pub fn concat_rows(parts: &[Var]) -> Result<Var> {
    concat(parts, true)
}

pub fn concat_cols(parts: &[Var]) -> Result<Var> {
    concat(parts, false)
}

/// Standalone forward of `matmul` used by non-differentiable inference paths.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))
}
