//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node once. Gradients are kept in `f64`.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    AddChannelBias(usize, usize),
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    Dropout {
        x: usize,
        scale: Vec<f64>,
    },
    GridAdd(usize, usize),
    ChannelsToRows(usize),
    WindowedAttention {
        q: usize,
        k: usize,
        v: usize,
        ranges: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<f64>,
    },
    ExternalGrad {
        x: usize,
        grad: Vec<f64>,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
///
/// A tape is single-threaded. Parameters enter it as shared [`Arc`] leaves so
/// binding a model to a tape does not copy weights.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Training tape: dropout masks are drawn from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op, requires_grad: bool) -> Result<Var<'_, T>> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.param(Arc::new(value))
    }

    /// Differentiable leaf sharing its storage with the caller.
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, true).expect("push never fails")
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_arc(Arc::new(value), Op::Leaf, false)
            .expect("push never fails")
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::from_f64(shape, g).expect("gradient shape matches value"))
    }

    pub fn grad_f64(&self, var: Var<'_, T>) -> Option<Vec<f64>> {
        self.grads.borrow().get(var.id)?.clone()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Back-propagates from a scalar. Gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut local);
            local[id] = Some(g);
        }
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (id, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn draw_keep_mask(&self, n: usize, rate: f64) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        let keep = 1.0 / (1.0 - rate);
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect()
    }
}

fn slot<'a>(local: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
    local[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(local: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
    let dst = slot(local, id, contrib.len());
    dst.iter_mut().zip(contrib).for_each(|(d, c)| *d += c);
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let req = |i: usize| nodes[i].requires_grad;
    let y = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if req(*a) {
                add_into(local, *a, g);
            }
            if req(*b) {
                add_into(local, *b, g);
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                add_into(local, *a, g);
            }
            if req(*b) {
                let d = slot(local, *b, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if req(*a) {
                let d = slot(local, *a, g.len());
                for ((d, g), b) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * b.widen();
                }
            }
            if req(*b) {
                let d = slot(local, *b, g.len());
                for ((d, g), a) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * a.widen();
                }
            }
        }
        Op::AddRow(x, b) => {
            if req(*x) {
                add_into(local, *x, g);
            }
            if req(*b) {
                let n = val(*b).numel();
                let d = slot(local, *b, n);
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Scale(x, c) => {
            let d = slot(local, *x, g.len());
            d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if req(*a) {
                let da = kernels::matmul_nt(g, bv.data(), m, n, k);
                add_into(local, *a, &da);
            }
            if req(*b) {
                let db = kernels::matmul_tn(av.data(), g, m, k, n);
                add_into(local, *b, &db);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let d = slot(local, *x, g.len());
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] += g[i * c + j];
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let d = slot(local, *x, g.len());
            for ((d, g), x) in d.iter_mut().zip(g).zip(xv.data()) {
                if x.widen() > 0.0 {
                    *d += g;
                }
            }
        }
        Op::Sigmoid(x) => {
            let d = slot(local, *x, g.len());
            for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                let y = y.widen();
                *d += g * y * (1.0 - y);
            }
        }
        Op::Tanh(x) => {
            let d = slot(local, *x, g.len());
            for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                let y = y.widen();
                *d += g * (1.0 - y * y);
            }
        }
        Op::Exp(x) => {
            let d = slot(local, *x, g.len());
            for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                *d += g * y.widen();
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            let d = slot(local, *x, g.len());
            for ((d, g), x) in d.iter_mut().zip(g).zip(xv.data()) {
                *d += g / x.widen();
            }
        }
        Op::Sum(x) => {
            let n = val(*x).numel();
            let d = slot(local, *x, n);
            d.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Reshape(x) => add_into(local, *x, g),
        Op::Softmax(x) => {
            let n = y.last_dim();
            let d = slot(local, *x, g.len());
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y.widen()).sum();
                for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += y.widen() * (g - dot);
                }
            }
        }
        Op::LogSoftmax(x) => {
            let n = y.last_dim();
            let d = slot(local, *x, g.len());
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                let sg: f64 = grow.iter().sum();
                for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += g - y.widen().exp() * sg;
                }
            }
        }
        Op::LogSumExp(x) => {
            let xv = val(*x);
            let n = xv.last_dim();
            let d = slot(local, *x, xv.numel());
            for (r, (drow, xrow)) in d.chunks_mut(n).zip(xv.data().chunks(n)).enumerate() {
                let out = y.data()[r].widen();
                for (d, x) in drow.iter_mut().zip(xrow) {
                    *d += g[r] * (x.widen() - out).exp();
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
            let gv = val(*gain);
            let n = gv.numel();
            let gain_d: Vec<f64> = gv.to_f64_vec();
            if req(*gain) {
                let d = slot(local, *gain, n);
                for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        d[j] += grow[j] * xrow[j];
                    }
                }
            }
            if req(*bias) {
                let d = slot(local, *bias, n);
                for grow in g.chunks(n) {
                    d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
            if req(*x) {
                let d = slot(local, *x, g.len());
                let nf = n as f64;
                for (r, ((drow, grow), xrow)) in
                    d.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                {
                    let dxhat: Vec<f64> = grow.iter().zip(&gain_d).map(|(g, w)| g * w).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] += inv_std[r] / nf * (nf * dxhat[j] - s1 - xrow[j] * s2);
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let (dx, dw) = kernels::conv2d_backward(xv.data(), wv.data(), g, geom);
            if req(*x) {
                add_into(local, *x, &dx);
            }
            if req(*w) {
                add_into(local, *w, &dw);
            }
        }
        Op::AddChannelBias(x, b) => {
            if req(*x) {
                add_into(local, *x, g);
            }
            if req(*b) {
                let c = val(*b).numel();
                let per = g.len() / c;
                let d = slot(local, *b, c);
                for (ch, chunk) in g.chunks(per).enumerate() {
                    d[ch] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let n = val(*x).numel();
            let d = slot(local, *x, n);
            for (g, &src) in g.iter().zip(argmax) {
                d[src] += g;
            }
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let e = tv.last_dim();
            let d = slot(local, *table, tv.numel());
            for (row, &id) in g.chunks(e).zip(ids) {
                d[id * e..(id + 1) * e]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let n = xv.last_dim();
            let w = y.last_dim();
            let d = slot(local, *x, xv.numel());
            for (r, grow) in g.chunks(w).enumerate() {
                d[r * n + start..r * n + start + w]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::ConcatCols(parts) => {
            let total = y.last_dim();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let w = pv.last_dim();
                if req(p) {
                    let d = slot(local, p, pv.numel());
                    for (r, drow) in d.chunks_mut(w).enumerate() {
                        drow.iter_mut()
                            .zip(&g[r * total + offset..r * total + offset + w])
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let n = xv.last_dim();
            let d = slot(local, *x, xv.numel());
            d[start * n..start * n + g.len()]
                .iter_mut()
                .zip(g)
                .for_each(|(d, g)| *d += g);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if req(p) {
                    add_into(local, p, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::Dropout { x, scale } => {
            let d = slot(local, *x, g.len());
            for ((d, g), s) in d.iter_mut().zip(g).zip(scale) {
                *d += g * s;
            }
        }
        Op::GridAdd(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (t, j) = (av.shape()[0], av.shape()[1]);
            let u = bv.shape()[0];
            if req(*a) {
                let d = slot(local, *a, t * j);
                for ti in 0..t {
                    for ui in 0..u {
                        let grow = &g[(ti * u + ui) * j..(ti * u + ui + 1) * j];
                        d[ti * j..(ti + 1) * j]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            if req(*b) {
                let d = slot(local, *b, u * j);
                for ti in 0..t {
                    for ui in 0..u {
                        let grow = &g[(ti * u + ui) * j..(ti * u + ui + 1) * j];
                        d[ui * j..(ui + 1) * j]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
        Op::ChannelsToRows(x) => {
            let xv = val(*x);
            let (c, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let d = slot(local, *x, xv.numel());
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        d[(ci * t + ti) * f + fi] += g[ti * c * f + ci * f + fi];
                    }
                }
            }
        }
        Op::WindowedAttention {
            q,
            k,
            v,
            ranges,
            scale,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let dk = qv.last_dim();
            let dv = vv.last_dim();
            let mut dq = vec![0.0; qv.numel()];
            let mut dkk = vec![0.0; kv.numel()];
            let mut dvv = vec![0.0; vv.numel()];
            let mut p_off = 0;
            for (t, &(lo, hi)) in ranges.iter().enumerate() {
                let p = &probs[p_off..p_off + (hi - lo)];
                p_off += hi - lo;
                let grow = &g[t * dv..(t + 1) * dv];
                let qrow = qv.row(t);
                let dp: Vec<f64> = (lo..hi)
                    .map(|s| grow.iter().zip(vv.row(s)).map(|(g, v)| g * v.widen()).sum())
                    .collect();
                let mix: f64 = p.iter().zip(&dp).map(|(p, d)| p * d).sum();
                for (i, s) in (lo..hi).enumerate() {
                    let ds = p[i] * (dp[i] - mix) * scale;
                    let krow = kv.row(s);
                    for c in 0..dk {
                        dq[t * dk + c] += ds * krow[c].widen();
                        dkk[s * dk + c] += ds * qrow[c].widen();
                    }
                    for c in 0..dv {
                        dvv[s * dv + c] += p[i] * grow[c];
                    }
                }
            }
            if req(*q) {
                add_into(local, *q, &dq);
            }
            if req(*k) {
                add_into(local, *k, &dkk);
            }
            if req(*v) {
                add_into(local, *v, &dvv);
            }
        }
        Op::ExternalGrad { x, grad } => {
            let d = slot(local, *x, grad.len());
            d.iter_mut().zip(grad).for_each(|(d, s)| *d += g[0] * s);
        }
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

pub(crate) fn to_tensor<T: Scalar>(shape: impl Into<Vec<usize>>, data: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, data).expect("op output shape")
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn emit(&self, value: Tensor<T>, op: Op, parents: &[usize], name: &'static str) -> Result<Var<'t, T>> {
        let rg = self.tape.requires(parents);
        self.tape.push(value, op, rg, name)
    }

    fn zip_map(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| T::cast(f(x.widen(), y.widen())))
            .collect();
        self.emit(Tensor::new(a.shape().to_vec(), data)?, op, &[self.id, other.id], name)
    }

    fn map(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t, T>> {
        let a = self.value();
        let data: Vec<T> = a.data().iter().map(|x| T::cast(f(x.widen()))).collect();
        self.emit(Tensor::new(a.shape().to_vec(), data)?, op, &[self.id], name)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_map(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_map(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_map(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a vector of length `last_dim` to every row.
    pub fn add_row(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let n = x.last_dim();
        if b.numel() != n {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let bd = b.to_f64_vec();
        let data: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::cast(v.widen() + bd[i % n]))
            .collect();
        self.emit(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::AddRow(self.id, bias.id),
            &[self.id, bias.id],
            "add_row",
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t, T>> {
        self.map("scale", |x| c * x, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.map("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.map("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.map("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.map("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t, T>> {
        self.map("ln", f64::ln, Op::Log(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().sum_f64();
        self.emit(Tensor::scalar(s), Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        self.emit(v, Op::Reshape(self.id), &[self.id], "reshape")
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        self.emit(
            to_tensor([m, n], &out),
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
            "matmul",
        )
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        self.emit(Tensor::new([c, r], data)?, Op::Transpose(self.id), &[self.id], "transpose")
    }

    /// Softmax over the last dimension.
    ///
    /// With a mask, disallowed positions receive a `-1e30` sentinel before
    /// max-subtraction and are forced to exactly zero afterwards. A row with
    /// no allowed position is a contract violation.
    pub fn softmax_last(&self, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.last_dim();
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::shape("softmax_last", x.shape(), &[m.len()]));
            }
        }
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let allowed = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            let row: Vec<f64> = (0..n)
                .map(|j| if allowed(j) { x.data()[r * n + j].widen() } else { -1e30 })
                .collect();
            if !(0..n).any(allowed) {
                return Err(Error::contract("softmax_last", format!("row {r} is fully masked")));
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n)
                .map(|j| if allowed(j) { (row[j] - mx).exp() } else { 0.0 })
                .collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        self.emit(to_tensor(x.shape().to_vec(), &out), Op::Softmax(self.id), &[self.id], "softmax")
    }

    pub fn log_softmax_last(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row: Vec<f64> = x.row(r).iter().map(|v| v.widen()).collect();
            out.extend(kernels::log_softmax_row(&row));
        }
        self.emit(
            to_tensor(x.shape().to_vec(), &out),
            Op::LogSoftmax(self.id),
            &[self.id],
            "log_softmax",
        )
    }

    /// `ln Σ exp` over the last dimension; the result drops that dimension.
    pub fn logsumexp_last(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out: Vec<f64> = (0..x.rows())
            .map(|r| {
                let row: Vec<f64> = x.row(r).iter().map(|v| v.widen()).collect();
                kernels::log_sum_exp(&row)
            })
            .collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        self.emit(to_tensor(shape, &out), Op::LogSumExp(self.id), &[self.id], "logsumexp")
    }

    /// Layer normalization over the last dimension with affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.last_dim();
        let (gv, bv) = (gain.value(), bias.value());
        if n == 0 || gv.numel() != n || bv.numel() != n {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let gd = gv.to_f64_vec();
        let bd = bv.to_f64_vec();
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row: Vec<f64> = x.row(r).iter().map(|v| v.widen()).collect();
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        self.emit(
            to_tensor(x.shape().to_vec(), &out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
            "layer_norm",
        )
    }

    /// Stride-1 cross-correlation of `[C_in×T×F]` with `[C_out×C_in×N×K]`
    /// kernels. Time is zero-padded on the left only; with
    /// `pad_time_left = N-1` the output at time `i` sees inputs `≤ i` only.
    pub fn conv2d(&self, kernels: Var<'t, T>, pad_time_left: usize, pad_freq: usize) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), kernels.value());
        if x.rank() != 3 || w.rank() != 4 || x.shape()[0] != w.shape()[1] {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let (c_in, t_in, f_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kn, kk) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let tp = t_in + pad_time_left;
        let fp = f_in + 2 * pad_freq;
        if kn > tp || kk > fp || kn == 0 || kk == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kn}×{kk} larger than padded input {tp}×{fp}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            t_in,
            f_in,
            kn,
            kk,
            pad_t: pad_time_left,
            pad_f: pad_freq,
            t_out: tp - kn + 1,
            f_out: fp - kk + 1,
        };
        let y = kernels::conv2d_forward(x.data(), w.data(), &geom);
        self.emit(
            to_tensor([c_out, geom.t_out, geom.f_out], &y),
            Op::Conv2d {
                x: self.id,
                w: kernels.id,
                geom,
            },
            &[self.id, kernels.id],
            "conv2d",
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C×...]` tensor.
    pub fn add_channel_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let c = x.shape()[0];
        if b.numel() != c {
            return Err(Error::shape("add_channel_bias", x.shape(), b.shape()));
        }
        let per = x.numel() / c.max(1);
        let data: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::cast(v.widen() + b.data()[i / per].widen()))
            .collect();
        self.emit(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::AddChannelBias(self.id, bias.id),
            &[self.id, bias.id],
            "add_channel_bias",
        )
    }

    /// Non-overlapping max pooling of `[C×T×F]`. A trailing partial window is
    /// pooled over the elements it has, so output lengths are `⌈T/pool_t⌉`
    /// and `⌈F/pool_f⌉`.
    pub fn max_pool2d(&self, pool_t: usize, pool_f: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 3 || pool_t == 0 || pool_f == 0 {
            return Err(Error::dim(
                "max_pool2d",
                format!("input {:?}, pool {pool_t}×{pool_f}", x.shape()),
            ));
        }
        let (c, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (to, fo) = (t.div_ceil(pool_t), f.div_ceil(pool_f));
        let mut data = Vec::with_capacity(c * to * fo);
        let mut argmax = Vec::with_capacity(c * to * fo);
        for ci in 0..c {
            for ti in 0..to {
                for fi in 0..fo {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for tt in ti * pool_t..((ti + 1) * pool_t).min(t) {
                        for ff in fi * pool_f..((fi + 1) * pool_f).min(f) {
                            let idx = (ci * t + tt) * f + ff;
                            let v = x.data()[idx].widen();
                            if best == usize::MAX || v > best_v {
                                best = idx;
                                best_v = v;
                            }
                        }
                    }
                    data.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        self.emit(
            Tensor::new([c, to, fo], data)?,
            Op::MaxPool2d { x: self.id, argmax },
            &[self.id],
            "max_pool2d",
        )
    }

    /// Rows `ids` of a `[V×E]` table, as `[ids.len()×E]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::dim("embedding", format!("table shape {:?}", table.shape())));
        }
        let (v, e) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::contract("embedding", format!("id {id} out of range {v}")));
            }
            data.extend_from_slice(table.row(id));
        }
        self.emit(
            Tensor::new([ids.len(), e], data)?,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
            "embedding",
        )
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.last_dim();
        if x.rank() != 2 || start + len > n {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {:?}", x.shape())));
        }
        let r = x.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.emit(
            Tensor::new([r, len], data)?,
            Op::SliceCols { x: self.id, start },
            &[self.id],
            "slice_cols",
        )
    }

    /// Rows `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || start + len > x.shape()[0] {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {:?}", x.shape())));
        }
        let n = x.shape()[1];
        let data = x.data()[start * n..(start + len) * n].to_vec();
        self.emit(
            Tensor::new([len, n], data)?,
            Op::SliceRows { x: self.id, start },
            &[self.id],
            "slice_rows",
        )
    }

    /// Elementwise dropout when the tape is in training mode; identity otherwise.
    pub fn dropout(&self, rate: f64) -> Result<Var<'t, T>> {
        if !self.tape.training || rate <= 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let scale = self.tape.draw_keep_mask(x.numel(), rate);
        let data: Vec<T> = x
            .data()
            .iter()
            .zip(&scale)
            .map(|(v, s)| T::cast(v.widen() * s))
            .collect();
        self.emit(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::Dropout { x: self.id, scale },
            &[self.id],
            "dropout",
        )
    }

    /// `[T×J] ⊕ [U×J] → [(T·U)×J]`, row `t·U+u` equal to `a_t + b_u`.
    pub fn grid_add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::shape("grid_add", a.shape(), b.shape()));
        }
        let (t, j) = (a.shape()[0], a.shape()[1]);
        let u = b.shape()[0];
        let mut data = Vec::with_capacity(t * u * j);
        for ti in 0..t {
            for ui in 0..u {
                data.extend(
                    a.row(ti)
                        .iter()
                        .zip(b.row(ui))
                        .map(|(x, y)| T::cast(x.widen() + y.widen())),
                );
            }
        }
        self.emit(
            Tensor::new([t * u, j], data)?,
            Op::GridAdd(self.id, other.id),
            &[self.id, other.id],
            "grid_add",
        )
    }

    /// `[C×T×F] → [T×(C·F)]`, channel-major within each row.
    pub fn channels_to_rows(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::dim("channels_to_rows", format!("{:?}", x.shape())));
        }
        let (c, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut data = vec![T::ZERO; c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                for fi in 0..f {
                    data[ti * c * f + ci * f + fi] = x.data()[(ci * t + ti) * f + fi];
                }
            }
        }
        self.emit(
            Tensor::new([t, c * f], data)?,
            Op::ChannelsToRows(self.id),
            &[self.id],
            "channels_to_rows",
        )
    }

    /// Attention of each query row `t` over key rows `ranges[t] = [lo, hi)`:
    /// `softmax(q_t·k_sᵀ·scale) · v_s`. Only the listed pairs are computed.
    pub fn windowed_attention(
        &self,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        ranges: &[(usize, usize)],
        scale: f64,
    ) -> Result<Var<'t, T>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[1] != k.shape()[1] {
            return Err(Error::shape("windowed_attention", q.shape(), k.shape()));
        }
        if k.shape()[0] != v.shape()[0] || ranges.len() != q.shape()[0] {
            return Err(Error::shape("windowed_attention", k.shape(), v.shape()));
        }
        let dv = v.shape()[1];
        let tk = k.shape()[0];
        let mut out = vec![0.0f64; ranges.len() * dv];
        let mut probs = Vec::new();
        for (t, &(lo, hi)) in ranges.iter().enumerate() {
            if lo >= hi || hi > tk {
                return Err(Error::contract(
                    "windowed_attention",
                    format!("query {t} has empty or invalid key range [{lo}, {hi})"),
                ));
            }
            let qrow = q.row(t);
            let scores: Vec<f64> = (lo..hi)
                .map(|s| {
                    let mut acc = 0.0;
                    for (a, b) in qrow.iter().zip(k.row(s)) {
                        acc += a.widen() * b.widen();
                    }
                    acc * scale
                })
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let orow = &mut out[t * dv..(t + 1) * dv];
            for (i, s) in (lo..hi).enumerate() {
                let p = e[i] / z;
                probs.push(p);
                for (o, val) in orow.iter_mut().zip(v.row(s)) {
                    *o += p * val.widen();
                }
            }
        }
        self.emit(
            to_tensor([ranges.len(), dv], &out),
            Op::WindowedAttention {
                q: self.id,
                k: keys.id,
                v: values.id,
                ranges: ranges.to_vec(),
                scale,
                probs,
            },
            &[self.id, keys.id, values.id],
            "windowed_attention",
        )
    }

    /// Scalar node whose value and gradient with respect to `self` were
    /// computed outside the tape (e.g. by a dynamic-programming loss).
    pub fn external_scalar(&self, value: f64, grad: Vec<f64>) -> Result<Var<'t, T>> {
        if grad.len() != self.value().numel() {
            return Err(Error::shape("external_scalar", &self.shape(), &[grad.len()]));
        }
        self.emit(
            Tensor::scalar(value),
            Op::ExternalGrad { x: self.id, grad },
            &[self.id],
            "external_scalar",
        )
    }
}

impl<'t, T: Scalar> Tape<T> {
    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].shape()[0];
        if vals.iter().any(|v| v.rank() != 2 || v.shape()[0] != rows) {
            return Err(Error::shape("concat_cols", vals[0].shape(), vals.last().unwrap().shape()));
        }
        let total: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.emit(Tensor::new([rows, total], data)?, Op::ConcatCols(ids.clone()), &ids, "concat_cols")
    }

    /// Concatenates 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].last_dim();
        if vals.iter().any(|v| v.rank() != 2 || v.shape()[1] != cols) {
            return Err(Error::shape("concat_rows", vals[0].shape(), vals.last().unwrap().shape()));
        }
        let rows: usize = vals.iter().map(|v| v.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.emit(Tensor::new([rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids, "concat_rows")
    }
}
