//! Recorded-tape reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for the backward pass. Node ids are handed out in push order, so
//! the node list is already topologically sorted and `backward` walks it once
//! in reverse.

use super::tensor::{self, matmul, matmul_nt, matmul_tn, normalize, Activation, Tensor2};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used to prove the gradient auditor
/// catches faults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiplies the gamma and beta gradients of every layer norm.
    LayerNormAffineGradScale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a 1×n row broadcast over every row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Activation(NodeId, Activation),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Bce {
        yhat: NodeId,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor2,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Probability clamp used by the binary cross-entropy node.
pub const BCE_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return Err(shape_err("add_row", vm.shape(), vr.shape()));
        }
        let cols = vm.cols();
        let mut data = vm.data().to_vec();
        for chunk in data.chunks_mut(cols.max(1)) {
            for (d, b) in chunk.iter_mut().zip(vr.data()) {
                *d += b;
            }
        }
        let v = Tensor2::from_raw(vm.rows(), cols, data);
        Ok(self.push(Op::AddRow(m, row), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor2::from_raw(va.rows(), va.cols(), data);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scaled(factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let v = tensor::activation(kind, self.value(a));
        self.push(Op::Activation(a, kind), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Tanh)
    }

    /// Row-wise softmax; columns with `key_mask[j] == false` get exactly zero weight.
    pub fn softmax_rows(&mut self, a: NodeId, key_mask: Option<&[bool]>) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a), key_mask)?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    /// Layer norm of every row of `x`; `gamma` and `beta` are 1×d.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(shape_err("layer_norm_rows", vx.shape(), vg.shape()));
        }
        if eps <= 0.0 || d == 0 {
            return Err(Error::Contract(format!("layer_norm_rows: eps = {eps}, d = {d}")));
        }
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for i in 0..vx.rows() {
            let (h, s) = normalize(vx.row(i), eps);
            for ((hj, g), b) in h.iter().zip(vg.data()).zip(vb.data()) {
                out.push(g * hj + b);
            }
            xhat.extend(h);
            inv_std.push(s);
        }
        let rows = vx.rows();
        let op = Op::LayerNormRows {
            x,
            gamma,
            beta,
            xhat: Tensor2::from_raw(rows, d, xhat),
            inv_std,
        };
        Ok(self.push(op, Tensor2::from_raw(rows, d, out)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first).shape(), v.shape()));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor2::from_raw(rows, cols, data);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor2::from_raw(1, 1, vec![self.value(a).sum()]);
        self.push(Op::Sum(a), v)
    }

    /// Mean binary cross-entropy of an n×1 (or 1×n) probability node against
    /// 0/1 labels, with probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, yhat: NodeId, labels: &[f64]) -> Result<NodeId> {
        let v = self.value(yhat);
        if v.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "bce",
                left: format!("{}x{}", v.rows(), v.cols()),
                right: format!("{} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l != 0.0 && **l != 1.0) {
            return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
        }
        let loss = bce_value(v.data(), labels);
        let out = Tensor2::from_raw(1, 1, vec![loss]);
        Ok(self.push(
            Op::Bce {
                yhat,
                labels: labels.to_vec(),
            },
            out,
        ))
    }

    /// Reverse sweep from a scalar node. Nodes that do not reach `loss` end up
    /// with a zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(m, row) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for i in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *row, Tensor2::from_raw(1, cols, db));
                    accumulate(&mut grads, *m, g.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, Tensor2::from_raw(g.rows(), g.cols(), da));
                    accumulate(&mut grads, *b, Tensor2::from_raw(g.rows(), g.cols(), db));
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scaled(*factor)),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Activation(a, kind) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(node.value.data())
                        .map(|((gv, xv), yv)| gv * kind.derivative(*xv, *yv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor2::from_raw(g.rows(), g.cols(), data));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut data = Vec::with_capacity(y.len());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        data.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                    }
                    accumulate(&mut grads, *a, Tensor2::from_raw(y.rows(), cols, data));
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = xhat.cols();
                    let dn = d as f64;
                    let gam = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(xhat.len());
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..xhat.rows() {
                        let (h, gr) = (xhat.row(i), g.row(i));
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let s = inv_std[i] / dn;
                        dx.extend(
                            dh.iter()
                                .zip(h)
                                .map(|(dhj, hj)| s * (dn * dhj - sum_dh - hj * sum_dh_h)),
                        );
                        for j in 0..d {
                            dgamma[j] += gr[j] * h[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    if let Some(Fault::LayerNormAffineGradScale(f)) = self.fault {
                        dgamma.iter_mut().chain(dbeta.iter_mut()).for_each(|v| *v *= f);
                    }
                    accumulate(&mut grads, *x, Tensor2::from_raw(xhat.rows(), d, dx));
                    accumulate(&mut grads, *gamma, Tensor2::from_raw(1, d, dgamma));
                    accumulate(&mut grads, *beta, Tensor2::from_raw(1, d, dbeta));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let mut data = Vec::with_capacity(rows * cols);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, *p, Tensor2::from_raw(rows, cols, data));
                        offset += cols;
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = g.data()[0];
                    accumulate(&mut grads, *a, Tensor2::from_raw(r, c, vec![v; r * c]));
                }
                Op::Bce { yhat, labels } => {
                    let v = self.value(*yhat);
                    let n = labels.len() as f64;
                    let upstream = g.data()[0];
                    let data = v
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            // the clamp is flat outside its interval
                            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                                0.0
                            } else {
                                upstream * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *yhat, Tensor2::from_raw(v.rows(), v.cols(), data));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn bce_value(probs: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / labels.len() as f64
}

/// Per-node gradients after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zero if `id` does not reach it.
    pub fn get(&self, id: NodeId) -> Tensor2 {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor2::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor2 {
        Tensor2::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 3, &[1.0, -2.0, 3.0, 0.0, 5.0, 6.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let unused = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused), Tensor2::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(x ⊙ x) → 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn bce_values_and_label_check() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(2, 1, &[0.9, 0.2]));
        let l = tape.bce(p, &[1.0, 0.0]).unwrap();
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((tape.value(l).get(0, 0) - expected).abs() < 1e-15);
        assert!((expected - 0.16425).abs() < 1e-5);

        let half = tape.leaf(t(1, 1, &[0.5]));
        let l = tape.bce(half, &[1.0]).unwrap();
        assert!((tape.value(l).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-15);

        let exact = tape.leaf(t(1, 1, &[1.0]));
        let l = tape.bce(exact, &[1.0]).unwrap();
        assert!((tape.value(l).get(0, 0) + (1.0 - BCE_CLAMP).ln()).abs() < 1e-20);

        assert!(tape.bce(half, &[2.0]).is_err());
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t(2, 2, &[0.3, -1.2, 2.2, 0.7]));
            let b = tape.leaf(t(2, 2, &[1.1, 0.4, -0.6, 0.9]));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c, None).unwrap();
            let h = tape.tanh(s);
            let l = tape.sum(h);
            let g = tape.backward(l).unwrap();
            (tape.value(l).clone(), g.get(a), g.get(b))
        };
        assert_eq!(run(), run());
    }
}
