//! Attention-weighted pooling over time and the sigmoid risk head.
//!
//! Pooling scores are additive: `e_i = vᵀ·tanh(W_aᵀ·H_i)`, normalized with a
//! masked softmax over valid positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Tape, Tensor2};

/// `w_a` is d_m × d_a, `v` is d_a × 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolParams<T = Tensor2> {
    pub w_a: T,
    pub v: T,
}

impl<T> PoolParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> PoolParams<U> {
        PoolParams {
            w_a: f(format!("{prefix}w_a"), &self.w_a),
            v: f(format!("{prefix}v"), &self.v),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.w_a);
        f(&mut self.v);
    }
}

/// `w_c` is d_m × 1, `b_c` is 1 × 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T = Tensor2> {
    pub w_c: T,
    pub b_c: T,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> HeadParams<U> {
        HeadParams {
            w_c: f(format!("{prefix}w_c"), &self.w_c),
            b_c: f(format!("{prefix}b_c"), &self.b_c),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.w_c);
        f(&mut self.b_c);
    }
}

/// Raw pooling scores `e` as a 1 × T row.
pub fn pooling_scores(tape: &mut Tape, h: NodeId, p: &PoolParams<NodeId>) -> Result<NodeId> {
    let proj = tape.matmul(h, p.w_a)?;
    let act = tape.tanh(proj);
    let e = tape.matmul(act, p.v)?;
    Ok(tape.transpose(e))
}

/// Pooling weights `a` (1 × T). Masked positions get exactly 0.
pub fn pooling_weights(
    tape: &mut Tape,
    h: NodeId,
    p: &PoolParams<NodeId>,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    if let Some(m) = mask {
        if !m.iter().any(|v| *v) {
            return Err(Error::Data("pooling needs at least one valid position".into()));
        }
    }
    let e = pooling_scores(tape, h, p)?;
    tape.softmax_rows(e, mask)
}

/// `Z = Σ a_i·H_i` as a 1 × d_m row.
pub fn pool(tape: &mut Tape, h: NodeId, a: NodeId) -> Result<NodeId> {
    let (hs, as_) = (tape.value(h).shape(), tape.value(a).shape());
    if as_ != (1, hs.0) {
        return Err(Error::Shape {
            op: "pool",
            left: format!("H {}x{}", hs.0, hs.1),
            right: format!("a {}x{}", as_.0, as_.1),
        });
    }
    tape.matmul(a, h)
}

/// `ŷ = σ(Z·W_c + b_c)`, a 1 × 1 node.
pub fn classify(tape: &mut Tape, z: NodeId, p: &HeadParams<NodeId>) -> Result<NodeId> {
    let logit = tape.matmul(z, p.w_c)?;
    let logit = tape.add_row(logit, p.b_c)?;
    Ok(tape.sigmoid(logit))
}

/// Mean clamped binary cross-entropy over a batch of predictions.
pub fn bce_loss(yhat: &[f64], labels: &[u8]) -> Result<f64> {
    if yhat.len() != labels.len() || yhat.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            yhat.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    let y: Vec<f64> = labels.iter().map(|l| f64::from(*l)).collect();
    Ok(crate::numcore::bce_value(yhat, &y))
}
