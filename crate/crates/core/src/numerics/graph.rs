//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves bound to a [`ParamId`]; using the same parameter twice (shared
//! weights) reuses a single leaf so gradients accumulate on it. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! a scalar loss with respect to every leaf.
//!
//! Subgradient conventions: `relu'(0) = 0`.

use std::collections::HashMap;
use std::rc::Rc;

use super::functional::{normalize, sigmoid, ConvTable};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::attention::kernel::{attention_backward, attention_forward, AttnOp};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
        batch_stats: bool,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        table: Rc<ConvTable>,
    },
    Unfold {
        x: Var,
        k: usize,
        stride: usize,
    },
    GatherRows(Var, Rc<Vec<usize>>),
    Attention(Box<AttnOp>),
    LogSoftmax(Var),
    /// Scalar produced by an external kernel with a precomputed gradient.
    Loss {
        input: Var,
        grad: Tensor,
    },
    Sum(Var),
    SumSquares(Var),
    LinComb(Vec<(Var, f64)>),
}

/// Batch-norm running-statistic update produced by a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients, indexed by [`ParamId`].
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n_params];
        for (id, v) in &self.params {
            out[id.0] = self.grads[v.0].clone();
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input (no gradient flows into callers, but [`Gradients::wrt`]
    /// still reports it when `track` is set).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (used by gradient checks).
    pub fn tracked_input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::raw(vec![n, m], matmul(av.data(), bv.data(), n, k, m));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::raw(av.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x c` (or length-`c`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv.data()[i % c])
            .collect();
        let out = Tensor::raw(av.shape().to_vec(), data);
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::raw(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::Shape("mask length".into()));
        }
        let out = Tensor::raw(
            av.shape().to_vec(),
            av.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::MulConst(a, Rc::new(mask)), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::raw(av.shape().to_vec(), av.data().iter().map(|x| x.max(0.0)).collect());
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::raw(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x * sigmoid(x)).collect(),
        );
        let ng = self.ng(&[a]);
        self.push(out, Op::Swish(a), ng)
    }

    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let out = super::functional::glu(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Glu(a), ng))
    }

    /// Row-wise layer normalisation.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape("layer_norm parameter size".into()));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..xv.rows() {
            let (h, s) = normalize(xv.row(i), eps);
            for j in 0..c {
                out.push(gv[j] * h[j] + bv[j]);
            }
            xhat.extend(h);
            inv.push(s);
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            ng,
        ))
    }

    /// Per-channel normalisation over rows. With `stats = None` the batch
    /// statistics are used (training); otherwise the given running mean and
    /// variance are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape("batch_norm parameter size".into()));
        }
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut m = vec![0.0; c];
                let mut v = vec![0.0; c];
                for i in 0..n {
                    for (j, x) in xv.row(i).iter().enumerate() {
                        m[j] += x;
                    }
                }
                m.iter_mut().for_each(|a| *a /= n as f64);
                for i in 0..n {
                    for (j, x) in xv.row(i).iter().enumerate() {
                        v[j] += (x - m[j]) * (x - m[j]);
                    }
                }
                v.iter_mut().for_each(|a| *a /= n as f64);
                (m, v)
            }
        };
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            for (j, x) in xv.row(i).iter().enumerate() {
                let h = (x - mean[j]) * inv[j];
                xhat.push(h);
                out.push(gv[j] * h + bv[j]);
            }
        }
        let out = Tensor::raw(vec![n, c], out);
        let ng = self.ng(&[x, gain, bias]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
                batch_stats: stats.is_none(),
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// Depthwise convolution with an explicit neighbour table.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, table: Rc<ConvTable>) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.rows() != table.k || kv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "conv kernel {:?} for {} taps x {} channels",
                kv.shape(),
                table.k,
                xv.cols()
            )));
        }
        let d = xv.cols();
        let out = Tensor::raw(vec![table.rows, d], table.apply(xv.data(), kv.data(), d));
        let ng = self.ng(&[x, kernel]);
        Ok(self.push(out, Op::DepthwiseConv { x, kernel, table }, ng))
    }

    /// Stacks `k` consecutive rows with the given stride into one row
    /// (valid positions only): output row `i` is rows `i*stride .. i*stride+k`.
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if n < k {
            return Err(Error::Shape(format!("unfold of {n} rows with window {k}")));
        }
        let m = (n - k) / stride + 1;
        let mut out = Vec::with_capacity(m * k * c);
        for i in 0..m {
            out.extend_from_slice(&xv.data()[i * stride * c..(i * stride + k) * c]);
        }
        let out = Tensor::raw(vec![m, k * c], out);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Unfold { x, k, stride }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Shape(format!("row {bad} out of {}", xv.rows())));
        }
        if idx.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::raw(vec![idx.len(), c], out);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GatherRows(x, Rc::new(idx)), ng))
    }

    pub(crate) fn attention(&mut self, op: AttnOp) -> Result<Var> {
        let (out, op) = attention_forward(self, op)?;
        let ng = self.ng(&op.inputs());
        Ok(self.push(out, Op::Attention(Box::new(op)), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..xv.rows() {
            out.extend(super::functional::log_softmax(xv.row(i)));
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Registers a scalar computed outside the tape together with its
    /// gradient with respect to `input`.
    pub fn external_loss(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::Shape("external loss gradient shape".into()));
        }
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Loss { input, grad }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// `sum_i c_i * x_i` over tensors of identical shape.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty linear combination".into()))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut acc = vec![0.0; self.value(first.0).len()];
        for (v, c) in terms {
            let t = self.value(*v);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape("lin_comb shape".into()));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        Ok(self.push(Tensor::raw(shape, acc), Op::LinComb(terms.to_vec()), ng))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param);
            let Some(g) = (if is_leaf { None } else { grads[i].take() }) else {
                continue;
            };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].needs_grad {
                    let da = matmul_nt(gd, bv.data(), n, m, k);
                    self.acc(grads, *a, Tensor::raw(vec![n, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let db = matmul_tn(av.data(), gd, n, k, m);
                    self.acc(grads, *b, Tensor::raw(vec![k, m], db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                let c = g.cols();
                self.acc_with(grads, *row, |d| {
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v;
                    }
                });
            }
            Op::Scale(a, c) => {
                let t = Tensor::raw(g.shape().to_vec(), gd.iter().map(|v| v * c).collect());
                self.acc(grads, *a, t);
            }
            Op::MulConst(a, m) => {
                let t = Tensor::raw(g.shape().to_vec(), gd.iter().zip(m.iter()).map(|(v, m)| v * m).collect());
                self.acc(grads, *a, t);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let t = gd
                    .iter()
                    .zip(x)
                    .map(|(v, x)| if *x > 0.0 { *v } else { 0.0 })
                    .collect();
                self.acc(grads, *a, Tensor::raw(g.shape().to_vec(), t));
            }
            Op::Swish(a) => {
                let x = self.value(*a).data();
                let t = gd
                    .iter()
                    .zip(x)
                    .map(|(v, &x)| {
                        let s = sigmoid(x);
                        v * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *a, Tensor::raw(g.shape().to_vec(), t));
            }
            Op::Glu(a) => {
                let x = self.value(*a);
                let h = x.cols() / 2;
                self.acc_with(grads, *a, |d| {
                    for i in 0..x.rows() {
                        let r = x.row(i);
                        for j in 0..h {
                            let s = sigmoid(r[h + j]);
                            let gv = gd[i * h + j];
                            d[i * 2 * h + j] += gv * s;
                            d[i * 2 * h + h + j] += gv * r[j] * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                self.acc_with(grads, *gain, |d| {
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v * xhat[i];
                    }
                });
                self.acc_with(grads, *bias, |d| {
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v;
                    }
                });
                self.acc_with(grads, *x, |d| {
                    for r in 0..g.rows() {
                        let off = r * c;
                        let dh: Vec<f64> = (0..c).map(|j| gd[off + j] * gv[j]).collect();
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = (0..c).map(|j| dh[j] * xhat[off + j]).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[off + j] += inv[r] * (dh[j] - m1 - xhat[off + j] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
                batch_stats,
            } => {
                let (n, c) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                self.acc_with(grads, *gain, |d| {
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v * xhat[i];
                    }
                });
                self.acc_with(grads, *bias, |d| {
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v;
                    }
                });
                self.acc_with(grads, *x, |d| {
                    for j in 0..c {
                        if *batch_stats {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for i in 0..n {
                                let dh = gd[i * c + j] * gv[j];
                                m1 += dh;
                                m2 += dh * xhat[i * c + j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for i in 0..n {
                                let dh = gd[i * c + j] * gv[j];
                                d[i * c + j] += inv[j] * (dh - m1 - xhat[i * c + j] * m2);
                            }
                        } else {
                            for i in 0..n {
                                d[i * c + j] += gd[i * c + j] * gv[j] * inv[j];
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, kernel, table } => {
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let c = g.cols();
                self.acc_with(grads, *x, |d| {
                    for i in 0..table.rows {
                        for j in 0..table.k {
                            if let Some(src) = table.taps[i * table.k + j] {
                                for ch in 0..c {
                                    d[src * c + ch] += kv[j * c + ch] * gd[i * c + ch];
                                }
                            }
                        }
                    }
                });
                self.acc_with(grads, *kernel, |d| {
                    for i in 0..table.rows {
                        for j in 0..table.k {
                            if let Some(src) = table.taps[i * table.k + j] {
                                for ch in 0..c {
                                    d[j * c + ch] += xv[src * c + ch] * gd[i * c + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::Unfold { x, k, stride } => {
                let c = self.value(*x).cols();
                self.acc_with(grads, *x, |d| {
                    let w = k * c;
                    for i in 0..g.rows() {
                        let base = i * stride * c;
                        for (o, v) in gd[i * w..(i + 1) * w].iter().enumerate() {
                            d[base + o] += v;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = g.cols();
                self.acc_with(grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += gd[r * c + j];
                        }
                    }
                });
            }
            Op::Attention(op) => {
                for (v, t) in attention_backward(self, op, g) {
                    self.acc(grads, v, t);
                }
            }
            Op::LogSoftmax(x) => {
                let c = g.cols();
                self.acc_with(grads, *x, |d| {
                    for r in 0..g.rows() {
                        let gs: f64 = gd[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            d[r * c + j] += gd[r * c + j] - out.data()[r * c + j].exp() * gs;
                        }
                    }
                });
            }
            Op::Loss { input, grad } => {
                let s = gd[0];
                let t = Tensor::raw(grad.shape().to_vec(), grad.data().iter().map(|v| v * s).collect());
                self.acc(grads, *input, t);
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::SumSquares(x) => {
                let s = gd[0];
                let xv = self.value(*x);
                let t = Tensor::raw(xv.shape().to_vec(), xv.data().iter().map(|v| 2.0 * v * s).collect());
                self.acc(grads, *x, t);
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    let t = Tensor::raw(g.shape().to_vec(), gd.iter().map(|x| x * c).collect());
                    self.acc(grads, *v, t);
                }
            }
        }
    }
}

/// Central finite-difference check helpers shared by unit and integration
/// tests.
pub mod gradcheck {
    use super::*;

    /// Largest relative error between analytic and central-difference
    /// gradients of `f` with respect to `x`, using
    /// `|a - n| / max(1, |a|, |n|)`.
    pub fn max_rel_error(
        x: &Tensor,
        analytic: &Tensor,
        step: f64,
        mut f: impl FnMut(&Tensor) -> f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += step;
            let mut xm = x.clone();
            xm.data_mut()[i] -= step;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        worst
    }
}
