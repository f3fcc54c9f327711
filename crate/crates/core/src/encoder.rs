//! Multi-head self-attention encoder with post-norm residual blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Tape, Tensor2};

/// Epsilon inside every layer norm of the encoder.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_enabled: bool,
    /// Defaults to `4 * d_model` when absent.
    pub d_ff: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_enabled: true,
            d_ff: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model = {}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_ff == Some(0) {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }
}

/// Per-head projections, each d_m × d_k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead<T = Tensor2> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

/// Position-wise feed-forward sublayer and its own layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams<T = Tensor2> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln_gamma: T,
    pub ln_beta: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams<T = Tensor2> {
    pub heads: Vec<AttentionHead<T>>,
    pub w_o: T,
    pub ln_gamma: T,
    pub ln_beta: T,
    pub ffn: Option<FfnParams<T>>,
}

impl<T> EncoderLayerParams<T> {
    pub fn map<U>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(String, &T) -> U,
    ) -> EncoderLayerParams<U> {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| AttentionHead {
                w_q: f(format!("{prefix}head{h}.w_q"), &head.w_q),
                w_k: f(format!("{prefix}head{h}.w_k"), &head.w_k),
                w_v: f(format!("{prefix}head{h}.w_v"), &head.w_v),
            })
            .collect();
        let w_o = f(format!("{prefix}w_o"), &self.w_o);
        let ln_gamma = f(format!("{prefix}ln1.gamma"), &self.ln_gamma);
        let ln_beta = f(format!("{prefix}ln1.beta"), &self.ln_beta);
        let ffn = self.ffn.as_ref().map(|ffn| FfnParams {
            w1: f(format!("{prefix}ffn.w1"), &ffn.w1),
            b1: f(format!("{prefix}ffn.b1"), &ffn.b1),
            w2: f(format!("{prefix}ffn.w2"), &ffn.w2),
            b2: f(format!("{prefix}ffn.b2"), &ffn.b2),
            ln_gamma: f(format!("{prefix}ln2.gamma"), &ffn.ln_gamma),
            ln_beta: f(format!("{prefix}ln2.beta"), &ffn.ln_beta),
        });
        EncoderLayerParams {
            heads,
            w_o,
            ln_gamma,
            ln_beta,
            ffn,
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        for head in &mut self.heads {
            f(&mut head.w_q);
            f(&mut head.w_k);
            f(&mut head.w_v);
        }
        f(&mut self.w_o);
        f(&mut self.ln_gamma);
        f(&mut self.ln_beta);
        if let Some(ffn) = &mut self.ffn {
            f(&mut ffn.w1);
            f(&mut ffn.b1);
            f(&mut ffn.w2);
            f(&mut ffn.b2);
            f(&mut ffn.ln_gamma);
            f(&mut ffn.ln_beta);
        }
    }
}

/// Output of one attention call: the mixed values and the weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub output: NodeId,
    pub weights: NodeId,
}

/// `softmax(QKᵀ/√d_k)·V`, masked keys forced to zero weight.
pub fn attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOut> {
    let (qs, ks, vs) = (
        tape.value(q).shape(),
        tape.value(k).shape(),
        tape.value(v).shape(),
    );
    if qs.1 != ks.1 || ks.0 != vs.0 {
        return Err(Error::Shape {
            op: "attention",
            left: format!("Q {}x{}, K {}x{}", qs.0, qs.1, ks.0, ks.1),
            right: format!("V {}x{}", vs.0, vs.1),
        });
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (qs.1 as f64).sqrt());
    let weights = tape.softmax_rows(scaled, key_mask)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOut { output, weights })
}

/// `concat(head₁ … headₙ)·W_O`. Also returns each head's weight matrix.
pub fn multi_head(
    tape: &mut Tape,
    h: NodeId,
    p: &EncoderLayerParams<NodeId>,
    key_mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let mut outputs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = tape.matmul(h, head.w_q)?;
        let k = tape.matmul(h, head.w_k)?;
        let v = tape.matmul(h, head.w_v)?;
        let out = attention(tape, q, k, v, key_mask)?;
        outputs.push(out.output);
        weights.push(out.weights);
    }
    let concat = tape.concat_cols(&outputs)?;
    Ok((tape.matmul(concat, p.w_o)?, weights))
}

/// `A = LN(H + MHA(H))`, then `LN(A + FFN(A))` when the FFN is present.
pub fn encoder_layer(
    tape: &mut Tape,
    h_prev: NodeId,
    p: &EncoderLayerParams<NodeId>,
    key_mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (mha, weights) = multi_head(tape, h_prev, p, key_mask)?;
    let res = tape.add(h_prev, mha)?;
    let a = tape.layer_norm_rows(res, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let Some(ffn) = &p.ffn else {
        return Ok((a, weights));
    };
    let hidden = tape.matmul(a, ffn.w1)?;
    let hidden = tape.add_row(hidden, ffn.b1)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, ffn.w2)?;
    let out = tape.add_row(out, ffn.b2)?;
    let res = tape.add(a, out)?;
    Ok((tape.layer_norm_rows(res, ffn.ln_gamma, ffn.ln_beta, LN_EPS)?, weights))
}

/// Applies the layers in order. Returns the final representation and the
/// attention weights per layer per head.
pub fn encode(
    tape: &mut Tape,
    h: NodeId,
    layers: &[EncoderLayerParams<NodeId>],
    key_mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
    let mut cur = h;
    let mut all = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, w) = encoder_layer(tape, cur, layer, key_mask)?;
        cur = next;
        all.push(w);
    }
    Ok((cur, all))
}
