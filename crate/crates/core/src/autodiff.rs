//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse creation order and records each
//! vector-Jacobian product as new tape operations, so gradients are
//! themselves differentiable: calling `backward` on a scalar built from
//! earlier gradients yields exact second-order quantities such as
//! `d/dx <u, dL/dtheta>`.
//!
//! The op set is closed under differentiation: the VJP of every op is
//! expressed with ops from the same set.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvPart {
    /// `(input, kernel)` -> output
    Output,
    /// `(kernel, output-shaped)` -> input-shaped
    InputGrad,
    /// `(input, output-shaped)` -> kernel-shaped
    KernelGrad,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    Sqrt(usize),
    Sum(usize),
    Expand(usize),
    RowSum(usize),
    ColSum(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    Relu(usize),
    /// `g * step(x)`; differentiable in `g` only.
    ReluMask(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(usize),
    Conv(ConvPart, usize, usize, ConvGeometry),
}

impl Op {
    /// Parents through which gradient flows.
    fn grad_parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf(_) => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MulScalar(a, b) | Conv(_, a, b, _) => {
                [Some(a), Some(b)]
            }
            ReluMask(g, _) => [Some(g), None],
            Transpose(a) | Scale(a, _) | Sqrt(a) | Sum(a) | Expand(a) | RowSum(a) | ColSum(a) | BroadcastRows(a)
            | BroadcastCols(a) | Relu(a) | Softmax(a) | LogSoftmax(a) | Reshape(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner recording of one forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotConnected);
        }
        Ok(v.index)
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    /// Forward value of a node.
    ///
    /// Panics if `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable recorded on another tape");
        &self.nodes[i].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match op {
            Op::Leaf(kind) => kind != LeafKind::Constant,
            _ => op.grad_parents().iter().flatten().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        self.push(value, Op::Leaf(kind))
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Constant)
    }

    fn shape_of(&self, i: usize) -> Vec<usize> {
        self.nodes[i].value.shape().to_vec()
    }

    fn mismatch(&self, op: &'static str, a: usize, b: usize) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape_of(a),
            right: self.shape_of(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let v = tensor::matmul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(v, Op::MatMul(ai, bi)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = tensor::transpose(&self.nodes[ai].value)?;
        Ok(self.push(v, Op::Transpose(ai)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ai].value.zip_map(&self.nodes[bi].value, name, f)?;
        Ok(self.push(v, op(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.map(|x| x * c);
        Ok(self.push(v, Op::Scale(ai, c)))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ai, si) = (self.idx(a)?, self.idx(s)?);
        if !self.nodes[si].value.is_scalar() {
            return Err(self.mismatch("mul_scalar", ai, si));
        }
        let c = self.nodes[si].value.item();
        let v = self.nodes[ai].value.map(|x| x * c);
        Ok(self.push(v, Op::MulScalar(ai, si)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(ai)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = Tensor::scalar(self.nodes[ai].value.sum());
        Ok(self.push(v, Op::Sum(ai)))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let si = self.idx(s)?;
        if !self.nodes[si].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "expand",
                left: self.shape_of(si),
                right: shape.to_vec(),
            });
        }
        let v = Tensor::filled(shape, self.nodes[si].value.item());
        Ok(self.push(v, Op::Expand(si)))
    }

    /// `[N, M] -> [N]`
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.nodes[ai].value;
        let (n, m) = t.dims2("row_sum")?;
        let v = (0..n).map(|i| t.data()[i * m..(i + 1) * m].iter().sum()).collect();
        Ok(self.push(Tensor::new(vec![n], v)?, Op::RowSum(ai)))
    }

    /// `[N, M] -> [M]`
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.nodes[ai].value;
        let (n, m) = t.dims2("col_sum")?;
        let mut v = vec![0.0; m];
        for i in 0..n {
            for (o, &x) in v.iter_mut().zip(&t.data()[i * m..(i + 1) * m]) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::new(vec![m], v)?, Op::ColSum(ai)))
    }

    /// `[M] -> [N, M]`, repeating the vector as every row.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.nodes[ai].value;
        if t.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                left: self.shape_of(ai),
                right: vec![rows],
            });
        }
        let m = t.numel();
        let v = t.data().repeat(rows);
        Ok(self.push(Tensor::new(vec![rows, m], v)?, Op::BroadcastRows(ai)))
    }

    /// `[N] -> [N, M]`, repeating the vector as every column.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.nodes[ai].value;
        if t.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                left: self.shape_of(ai),
                right: vec![cols],
            });
        }
        let n = t.numel();
        let v = t.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        Ok(self.push(Tensor::new(vec![n, cols], v)?, Op::BroadcastCols(ai)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = tensor::relu(&self.nodes[ai].value);
        Ok(self.push(v, Op::Relu(ai)))
    }

    fn relu_mask(&mut self, g: usize, x: usize) -> Result<usize> {
        let v = self.nodes[g].value.zip_map(&self.nodes[x].value, "relu_mask", |g, x| if x > 0.0 { g } else { 0.0 })?;
        Ok(self.push(v, Op::ReluMask(g, x)).index)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = tensor::softmax_rows(&self.nodes[ai].value)?;
        Ok(self.push(v, Op::Softmax(ai)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = tensor::log_softmax_rows(&self.nodes[ai].value)?;
        Ok(self.push(v, Op::LogSoftmax(ai)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.nodes[ai].value.reshape(shape)?;
        Ok(self.push(v, Op::Reshape(ai)))
    }

    /// Valid convolution of a `[C, H, W]` input with an `[O, C, K, K]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(input)?, self.idx(kernel)?);
        let geo = ConvGeometry::new(self.nodes[xi].value.shape(), self.nodes[ki].value.shape(), stride)?;
        let out = self.conv_part(ConvPart::Output, xi, ki, geo)?;
        Ok(self.var(out))
    }

    fn conv_part(&mut self, part: ConvPart, a: usize, b: usize, geo: ConvGeometry) -> Result<usize> {
        let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let (data, shape) = match part {
            ConvPart::Output => (geo.output(av, bv), geo.output_shape()),
            ConvPart::InputGrad => (geo.input_grad(av, bv), geo.input_shape()),
            ConvPart::KernelGrad => (geo.kernel_grad(av, bv), geo.kernel_shape()),
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Conv(part, a, b, geo)).index)
    }

    /// `x [N, in] @ w [in, out] + b [out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rows = self.value(y).shape()[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(y, bb)
    }

    /// Adds a per-channel bias `[O]` to a `[O, H, W]` feature map.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [o, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: shape,
                right: self.value(b).shape().to_vec(),
            });
        };
        let flat = self.reshape(x, &[o, h * w])?;
        let bb = self.broadcast_cols(b, h * w)?;
        let y = self.add(flat, bb)?;
        self.reshape(y, &[o, h, w])
    }

    /// Mean cross-entropy of `[N, C]` logits against `labels`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (n, c) = self.nodes[li].value.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        let mut pick = vec![0.0; n * c];
        for (row, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            pick[row * c + label] = -1.0 / n as f64;
        }
        let logp = self.log_softmax(logits)?;
        let pick = self.constant(Tensor::new(vec![n, c], pick)?);
        let picked = self.mul(logp, pick)?;
        self.sum(picked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn accumulate(&mut self, grads: &mut [Option<usize>], target: usize, g: usize) -> Result<()> {
        grads[target] = Some(match grads[target] {
            None => g,
            Some(prev) => self.add(self.var(prev), self.var(g))?.index,
        });
        Ok(())
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned gradients live on this tape and can be differentiated
    /// again. Variables that `loss` does not depend on get a zero gradient.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let li = self.idx(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.shape_of(li)));
        }
        let targets = wrt.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;

        // Nodes with a path from some target.
        let mut needed = vec![false; li + 1];
        for &t in &targets {
            if t <= li {
                needed[t] = true;
            }
        }
        for i in 0..=li {
            if !needed[i] && self.nodes[i].requires_grad {
                needed[i] = self.nodes[i].op.grad_parents().iter().flatten().any(|&p| needed[p]);
            }
        }

        let mut grads: Vec<Option<usize>> = vec![None; li + 1];
        grads[li] = Some(self.constant(Tensor::scalar(1.0)).index);

        for i in (0..=li).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op;
            for (parent, vjp) in self.vjp(op, i, g)? {
                if needed[parent] {
                    self.accumulate(&mut grads, parent, vjp)?;
                }
            }
        }

        targets
            .iter()
            .map(|&t| match grads.get(t).copied().flatten() {
                Some(g) => Ok(self.var(g)),
                None => {
                    let shape = self.shape_of(t);
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Records the vector-Jacobian products of node `out` (computed by `op`)
    /// against the upstream gradient `g`.
    fn vjp(&mut self, op: Op, out: usize, g: usize) -> Result<Vec<(usize, usize)>> {
        let id = self.id;
        let v = move |i: usize| Var { tape: id, index: i };
        let gv = v(g);
        let wanted = |tape: &Tape, i: usize| tape.nodes[i].requires_grad;
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                if wanted(self, a) {
                    let bt = self.transpose(v(b))?;
                    res.push((a, self.matmul(gv, bt)?.index));
                }
                if wanted(self, b) {
                    let at = self.transpose(v(a))?;
                    res.push((b, self.matmul(at, gv)?.index));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(gv)?.index)),
            Op::Add(a, b) => {
                res.push((a, g));
                res.push((b, g));
            }
            Op::Sub(a, b) => {
                res.push((a, g));
                if wanted(self, b) {
                    res.push((b, self.scale(gv, -1.0)?.index));
                }
            }
            Op::Mul(a, b) => {
                if wanted(self, a) {
                    res.push((a, self.mul(gv, v(b))?.index));
                }
                if wanted(self, b) {
                    res.push((b, self.mul(gv, v(a))?.index));
                }
            }
            Op::Div(a, b) => {
                if wanted(self, a) {
                    res.push((a, self.div(gv, v(b))?.index));
                }
                if wanted(self, b) {
                    let go = self.mul(gv, v(out))?;
                    let q = self.div(go, v(b))?;
                    res.push((b, self.scale(q, -1.0)?.index));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(gv, c)?.index)),
            Op::MulScalar(a, s) => {
                if wanted(self, a) {
                    res.push((a, self.mul_scalar(gv, v(s))?.index));
                }
                if wanted(self, s) {
                    let p = self.dot(gv, v(a))?;
                    let shape = self.shape_of(s);
                    res.push((s, self.reshape(p, &shape)?.index));
                }
            }
            Op::Sqrt(a) => {
                let half = self.scale(gv, 0.5)?;
                res.push((a, self.div(half, v(out))?.index));
            }
            Op::Sum(a) => {
                let shape = self.shape_of(a);
                res.push((a, self.expand(gv, &shape)?.index));
            }
            Op::Expand(a) => {
                let s = self.sum(gv)?;
                let shape = self.shape_of(a);
                res.push((a, self.reshape(s, &shape)?.index));
            }
            Op::RowSum(a) => {
                let m = self.shape_of(a)[1];
                res.push((a, self.broadcast_cols(gv, m)?.index));
            }
            Op::ColSum(a) => {
                let n = self.shape_of(a)[0];
                res.push((a, self.broadcast_rows(gv, n)?.index));
            }
            Op::BroadcastRows(a) => res.push((a, self.col_sum(gv)?.index)),
            Op::BroadcastCols(a) => res.push((a, self.row_sum(gv)?.index)),
            Op::Relu(a) => res.push((a, self.relu_mask(g, a)?)),
            Op::ReluMask(gi, x) => res.push((gi, self.relu_mask(g, x)?)),
            Op::Softmax(a) => {
                // s * (g - rowsum(g * s))
                let s = v(out);
                let c = self.shape_of(out)[1];
                let gs = self.mul(gv, s)?;
                let r = self.row_sum(gs)?;
                let rb = self.broadcast_cols(r, c)?;
                let d = self.sub(gv, rb)?;
                res.push((a, self.mul(s, d)?.index));
            }
            Op::LogSoftmax(a) => {
                // g - softmax(x) * rowsum(g)
                let c = self.shape_of(out)[1];
                let s = self.softmax(v(a))?;
                let r = self.row_sum(gv)?;
                let rb = self.broadcast_cols(r, c)?;
                let sr = self.mul(s, rb)?;
                res.push((a, self.sub(gv, sr)?.index));
            }
            Op::Reshape(a) => {
                let shape = self.shape_of(a);
                res.push((a, self.reshape(gv, &shape)?.index));
            }
            Op::Conv(part, a, b, geo) => {
                // The three parts are the partial contractions of one trilinear form.
                let (pa, pb) = match part {
                    ConvPart::Output => ((ConvPart::InputGrad, b, g), (ConvPart::KernelGrad, a, g)),
                    ConvPart::InputGrad => ((ConvPart::KernelGrad, g, b), (ConvPart::Output, g, a)),
                    ConvPart::KernelGrad => ((ConvPart::InputGrad, g, b), (ConvPart::Output, a, g)),
                };
                if wanted(self, a) {
                    res.push((a, self.conv_part(pa.0, pa.1, pa.2, geo)?));
                }
                if wanted(self, b) {
                    res.push((b, self.conv_part(pb.0, pb.1, pb.2, geo)?));
                }
            }
        }
        Ok(res)
    }
}
