//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its result, and records how it was produced. Node ids are
//! assigned in recording order, so walking the arena backwards from the loss
//! is a valid reverse topological order.
//!
//! Tapes are rebuilt for every training step: the graph depends on caption
//! length. A tape is single-threaded; independent tapes may live on different
//! threads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[m×k] · b[k×n]`; `n == 1` covers a rank-1 right operand.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    AddN(Vec<Var>),
    Column {
        matrix: Var,
        index: usize,
    },
    Select {
        src: Var,
        index: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf. Its gradient is always reported by
    /// [`Tape::backward`], as zeros when the loss does not reach it.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = match sa {
            [m, k] => (*m, *k),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let (kb, n, out_shape) = match sb {
            [kb] => (*kb, 1, vec![m]),
            [kb, n] => (*kb, *n, vec![m, *n]),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, row) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = dot(row, bd);
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], orow);
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = &self.nodes[a.0].value;
        let data = value.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        match kind {
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return Err(Error::Domain(format!(
                "softmax expects a vector, got shape {:?}",
                x.shape()
            )));
        }
        let value = Tensor::vector(softmax(x.data()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return Err(Error::Domain(format!(
                "log_softmax expects a vector, got shape {:?}",
                x.shape()
            )));
        }
        let value = Tensor::vector(log_softmax(x.data()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Joins rank-1 tensors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Domain("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::dim("concat", v.shape(), &[]));
            }
            data.extend_from_slice(v.data());
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// `src[start..start + len]` of a rank-1 tensor.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src);
        if v.rank() != 1 || len == 0 || start + len > v.len() {
            return Err(Error::dim("slice", v.shape(), &[start, len]));
        }
        let value = Tensor::vector(v.data()[start..start + len].to_vec());
        let rg = self.needs(&[src]);
        Ok(self.push(value, Op::Slice { src, start }, rg))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::Domain("stack of zero rows".into()));
        };
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != width {
                return Err(Error::dim("stack_rows", self.shape(first), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows.len(), width, data)?;
        let rg = self.needs(rows);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Domain("add_n of zero terms".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("add_n", &shape, self.shape(p)));
            }
            for (a, x) in acc.iter_mut().zip(self.data(p)) {
                *a += x;
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::new(shape, acc)?, Op::AddN(parts.to_vec()), rg))
    }

    /// Column `index` of a matrix, as a vector.
    pub fn column(&mut self, matrix: Var, index: usize) -> Result<Var> {
        let m = self.value(matrix);
        let [rows, cols] = *m.shape() else {
            return Err(Error::dim("column", m.shape(), &[index]));
        };
        if index >= cols {
            return Err(Error::Index { index, bound: cols });
        }
        let data = (0..rows).map(|r| m.data()[r * cols + index]).collect();
        let rg = self.needs(&[matrix]);
        Ok(self.push(Tensor::vector(data), Op::Column { matrix, index }, rg))
    }

    /// Entry `index` of a vector, as a one-element tensor.
    pub fn select(&mut self, src: Var, index: usize) -> Result<Var> {
        let v = self.value(src);
        if index >= v.len() {
            return Err(Error::Index {
                index,
                bound: v.len(),
            });
        }
        let value = Tensor::scalar(v.data()[index]);
        let rg = self.needs(&[src]);
        Ok(self.push(value, Op::Select { src, index }, rg))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match g {
                    Some(g) => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    None if node.requires_grad && matches!(node.op, Op::Leaf) => {
                        Some(Tensor::zeros(node.value.shape()))
                    }
                    None => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = self.slot(grads, *a);
                    // dA = dY · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(grow[0], bd, garow);
                        } else {
                            for (p, gap) in garow.iter_mut().enumerate() {
                                *gap += dot(grow, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.slot(grads, *b);
                    // dB = Aᵀ · dY
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        if n == 1 {
                            axpy(grow[0], arow, gb);
                        } else {
                            for (p, &aip) in arow.iter().enumerate() {
                                axpy(aip, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if let Some(gb) = self.slot_opt(grads, *b) {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot_opt(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot_opt(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot_opt(grads, *a) {
                    axpy(*s, g, ga);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Tanh(a) => {
                if let Some(ga) = self.slot_opt(grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot_opt(grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot_opt(grads, *a) {
                    let gy = dot(g, y);
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += yi * (gi - gy);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.slot_opt(grads, *a) {
                    let gsum: f64 = g.iter().sum();
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi - yi.exp() * gsum;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Slice { src, start } => {
                if let Some(gs) = self.slot_opt(grads, *src) {
                    for (x, gi) in gs[*start..*start + g.len()].iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
            Op::StackRows(rows) => {
                let width = node.value.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    self.accumulate(grads, r, &g[i * width..(i + 1) * width]);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot_opt(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g);
                }
            }
            Op::Column { matrix, index } => {
                if let Some(gm) = self.slot_opt(grads, *matrix) {
                    let cols = self.shape(*matrix)[1];
                    for (r, gi) in g.iter().enumerate() {
                        gm[r * cols + index] += gi;
                    }
                }
            }
            Op::Select { src, index } => {
                if let Some(gs) = self.slot_opt(grads, *src) {
                    gs[*index] += g[0];
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn slot_opt<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if self.nodes[v.0].requires_grad {
            Some(self.slot(grads, v))
        } else {
            None
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if let Some(slot) = self.slot_opt(grads, v) {
            for (x, gi) in slot.iter_mut().zip(g) {
                *x += gi;
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Always `Some` for parameter
    /// leaves recorded before the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics when the gradient was not tracked.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient tracked for this node")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of a nonempty slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `x - logsumexp(x)`, max-shifted.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}
