//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters are borrowed from a [`ParamStore`] and their gradients are
//! accumulated into a [`GradStore`]; nothing is zeroed implicitly.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, multi_head_attention_backward};
use crate::boundary::{Alignment, BoundarySet};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{gemm, layer_norm, sigmoid, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
        beta: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    FireAlign {
        w: Var,
        alignment: Alignment,
    },
    RescaleToSum {
        w: Var,
        target: f64,
    },
    ScalarLoss {
        input: Var,
        grad: Tensor,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph borrowing model parameters for its lifetime.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_nodes: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`] for leaf inputs.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'p> Graph<'p> {
    /// Graph without parameters (tests, pure functions).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_nodes: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// Enables inverted dropout driven by `rng`. Without it, dropout is the
    /// identity (evaluation mode).
    pub fn enable_dropout(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = Some(rng);
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id] {
            return v;
        }
        let store = self.params.expect("graph built without a parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.numel() != cols {
            return shape_err(format!("bias of length {} for width {cols}", vb.numel()));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x · weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, rstd) = layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
                beta,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention (no projections).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let res = multi_head_attention(self.value(q), self.value(k), self.value(v), mask, heads)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            res.output,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights: res.weights,
            },
            rg,
        ))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.require_matrix("gather table")?;
        if ids.is_empty() {
            return shape_err("gather with no ids".into());
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return shape_err(format!("row {id} out of range for table with {rows} rows"));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat of matrices with different row counts".into());
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Inverted dropout; identity unless dropout was enabled on this graph.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::MaskMul { x, mask }, rg)
    }

    /// Integrate-and-fire alignment matrix `A` (`m × n`) for the weights in
    /// `w`; `A · H` gives the fired segment embeddings. The fired boundaries
    /// are returned alongside and carry no gradient.
    pub fn fire_align(&mut self, w: Var, threshold: f64, tail_fraction: Option<f64>) -> Result<(Var, BoundarySet)> {
        let weights = self.value(w).data().to_vec();
        let alignment = Alignment::compute(&weights, threshold, tail_fraction)?;
        let boundaries = alignment.boundaries().clone();
        let matrix = alignment.matrix();
        let rg = self.rg(w);
        let var = self.push(matrix, Op::FireAlign { w, alignment }, rg);
        Ok((var, boundaries))
    }

    /// `w · target / Σw`.
    pub fn rescale_to_sum(&mut self, w: Var, target: f64) -> Result<Var> {
        let v = self.value(w);
        let sum: f64 = v.data().iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::Data(format!("cannot rescale weights with sum {sum}")));
        }
        let out = v.map(|x| x * target / sum);
        let rg = self.rg(w);
        Ok(self.push(out, Op::RescaleToSum { w, target }, rg))
    }

    /// Scalar computed outside the graph together with its gradient with
    /// respect to `input`.
    pub fn scalar_loss(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return shape_err("loss gradient shape differs from its input".into());
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { input, grad }, rg))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store`; leaf input gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut GradStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    if store.len() > *id {
                        store.accumulate(*id, &g);
                    }
                    grads[idx] = Some(g);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                    self.acc(grads, *a, Tensor::new(va.shape().to_vec(), da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, Tensor::new(shape, db).expect("shape"));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                let numel = self.value(*x).numel();
                self.acc(grads, *x, Tensor::new(shape, vec![g.item(); numel]).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
                beta,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.data()[r * cols + c];
                            dg[c] += gv * xhat.data()[r * cols + c];
                            db[c] += gv;
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.acc(grads, *gamma, Tensor::new(gshape, dg).expect("shape"));
                    self.acc(grads, *beta, Tensor::new(bshape, db).expect("shape"));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xh = &xhat.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            dx[r * cols + c] = rstd[r] * (dxh - mean_d - xh[c] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (dq, dk, dv) = multi_head_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    weights,
                    *heads,
                    g,
                );
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::GatherRows { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *table, dt);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (rows, cols) = (pv.rows(), pv.cols());
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                    }
                    offset += cols;
                }
            }
            Op::MaskMul { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::FireAlign { w, alignment } => {
                let dw = alignment.backward(g);
                let shape = self.value(*w).shape().to_vec();
                self.acc(grads, *w, Tensor::new(shape, dw).expect("shape"));
            }
            Op::RescaleToSum { w, target } => {
                let wv = self.value(*w).data();
                let sum: f64 = wv.iter().sum();
                let gw: f64 = g.data().iter().zip(wv).map(|(a, b)| a * b).sum();
                let d = g
                    .data()
                    .iter()
                    .map(|gv| target / sum * gv - target / (sum * sum) * gw)
                    .collect();
                self.acc(grads, *w, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::ScalarLoss { input, grad } => {
                let s = g.item();
                self.acc(grads, *input, grad.map(|v| v * s));
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_times_param_has_zero_gradient() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![3.0, -2.0]).unwrap());
        let z = g.scale(p, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss, &mut GradStore::empty()).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let p = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(p);
        let grads = g.backward(s, &mut GradStore::empty()).unwrap();
        assert_eq!(grads.wrt(p).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(p, &mut GradStore::empty()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn parameter_gradients_accumulate_across_calls() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut grads = GradStore::for_params(&store);
        let mut g = Graph::with_params(&store);
        let w = g.param(id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(id).data(), &[2.0, 4.0]);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(id).data(), &[4.0, 8.0]);
        grads.zero();
        assert_eq!(grads.get(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_matmul_gradient_is_outer_structure() {
        // loss = Σ (x·W) ⇒ dL/dW[i][j] = Σ_r x[r][i]
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let w = g.input(Tensor::from_rows(&[vec![0.5, 0.1, 0.0], vec![-0.2, 0.3, 0.7]]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss, &mut GradStore::empty()).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[4.0, 4.0, 4.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(g.dropout(x, 0.5), x);
    }
}
