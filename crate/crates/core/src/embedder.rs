//! Linear feature embedding plus the learnable time-gap encoding
//! `relu(W_t·Δt + b_t)`, summed into the encoder input.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{NodeId, Tape, Tensor2};

/// `w_e` is d_in × d_m; `b_e`, `w_t` and `b_t` are 1 × d_m rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams<T = Tensor2> {
    pub w_e: T,
    pub b_e: T,
    pub w_t: T,
    pub b_t: T,
}

impl<T> EmbedParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> EmbedParams<U> {
        EmbedParams {
            w_e: f(format!("{prefix}w_e"), &self.w_e),
            b_e: f(format!("{prefix}b_e"), &self.b_e),
            w_t: f(format!("{prefix}w_t"), &self.w_t),
            b_t: f(format!("{prefix}b_t"), &self.b_t),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.w_e);
        f(&mut self.b_e);
        f(&mut self.w_t);
        f(&mut self.b_t);
    }
}

impl EmbedParams {
    pub fn attach(&self, tape: &mut Tape) -> EmbedParams<NodeId> {
        self.map("", &mut |_, t| tape.leaf(t.clone()))
    }

    pub fn d_model(&self) -> usize {
        self.w_e.cols()
    }
}

/// `H₀ = X·W_e + b_e`, bias broadcast over rows.
pub fn embed_features(tape: &mut Tape, x: NodeId, p: &EmbedParams<NodeId>) -> Result<NodeId> {
    let (xs, ws) = (tape.value(x).shape(), tape.value(p.w_e).shape());
    if xs.1 != ws.0 {
        return Err(shape_err("embed_features", xs, ws));
    }
    let proj = tape.matmul(x, p.w_e)?;
    tape.add_row(proj, p.b_e)
}

/// Row `i` is `relu(W_t·Δt_i + b_t)`. With `log1p`, `ln(1 + Δt)` replaces `Δt`.
pub fn temporal_encode(
    tape: &mut Tape,
    dt: &[f64],
    p: &EmbedParams<NodeId>,
    log1p: bool,
) -> Result<NodeId> {
    if let Some((i, bad)) = dt.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("time gap {i} is {bad}; gaps must be >= 0")));
    }
    let col: Vec<f64> = if log1p {
        dt.iter().map(|v| v.ln_1p()).collect()
    } else {
        dt.to_vec()
    };
    let dt_node = tape.leaf(Tensor2::col_vector(&col)?);
    let scaled = tape.matmul(dt_node, p.w_t)?;
    let shifted = tape.add_row(scaled, p.b_t)?;
    Ok(tape.relu(shifted))
}

/// `H = H₀ + T`.
pub fn combine(tape: &mut Tape, h0: NodeId, tm: NodeId) -> Result<NodeId> {
    tape.add(h0, tm)
}
