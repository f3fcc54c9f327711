//! The full risk model: embedding, temporal encoding, encoder stack,
//! attention pooling and sigmoid head, wired onto one tape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{combine, embed_features, temporal_encode, EmbedParams};
use crate::encoder::{encode, AttentionHead, EncoderConfig, EncoderLayerParams, FfnParams};
use crate::error::{Error, Result};
use crate::head::{classify, pool, pooling_weights, HeadParams, PoolParams};
use crate::ingest::{Batch, VectorizedSequence};
use crate::numcore::{Fault, NodeId, Tape, Tensor2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input width; 0 means "take it from the fitted feature space".
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_enabled: bool,
    pub d_ff: Option<usize>,
    /// Width of the pooling score projection; defaults to `d_model`.
    pub d_attn: Option<usize>,
    /// Feed `ln(1 + Δt)` to the temporal encoding instead of raw hours.
    pub dt_log1p: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            d_in: 0,
            d_model: enc.d_model,
            n_heads: enc.n_heads,
            n_layers: enc.n_layers,
            ffn_enabled: enc.ffn_enabled,
            d_ff: enc.d_ff,
            d_attn: None,
            dt_log1p: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ffn_enabled: self.ffn_enabled,
            d_ff: self.d_ff,
        }
    }

    pub fn d_attn(&self) -> usize {
        self.d_attn.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be set before building a model".into()));
        }
        if self.d_attn == Some(0) {
            return Err(Error::Config("d_attn must be positive".into()));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        ModelParams::shapes(self).map(&mut |_, (r, c)| n += r * c);
        n
    }
}

/// Every learnable block of the model. With `T = NodeId` the same structure
/// addresses the blocks on a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Tensor2> {
    pub config: ModelConfig,
    pub embed: EmbedParams<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub pool: PoolParams<T>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    /// Visits every block in canonical order with its dotted name.
    pub fn map<U>(&self, f: &mut impl FnMut(String, &T) -> U) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            embed: self.embed.map("embed.", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map(&format!("layer{l}."), f))
                .collect(),
            pool: self.pool.map("pool.", f),
            head: self.head.map("head.", f),
        }
    }

    /// Same order as [`ModelParams::map`].
    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.embed.for_each_mut(f);
        for layer in &mut self.layers {
            layer.for_each_mut(f);
        }
        self.pool.for_each_mut(f);
        self.head.for_each_mut(f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |n, _| out.push(n));
        out
    }
}

impl<T: Clone> ModelParams<T> {
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.map(&mut |_, t| out.push(t.clone()));
        out
    }
}

impl ModelParams<(usize, usize)> {
    fn from_config(config: &ModelConfig) -> Self {
        let (d_in, d_m, d_a) = (config.d_in, config.d_model, config.d_attn());
        let enc = config.encoder();
        let (d_k, d_ff) = (enc.d_k(), enc.d_ff());
        let layer = EncoderLayerParams {
            heads: vec![
                AttentionHead {
                    w_q: (d_m, d_k),
                    w_k: (d_m, d_k),
                    w_v: (d_m, d_k),
                };
                config.n_heads
            ],
            w_o: (d_m, d_m),
            ln_gamma: (1, d_m),
            ln_beta: (1, d_m),
            ffn: config.ffn_enabled.then_some(FfnParams {
                w1: (d_m, d_ff),
                b1: (1, d_ff),
                w2: (d_ff, d_m),
                b2: (1, d_m),
                ln_gamma: (1, d_m),
                ln_beta: (1, d_m),
            }),
        };
        ModelParams {
            config: config.clone(),
            embed: EmbedParams {
                w_e: (d_in, d_m),
                b_e: (1, d_m),
                w_t: (1, d_m),
                b_t: (1, d_m),
            },
            layers: vec![layer; config.n_layers],
            pool: PoolParams {
                w_a: (d_m, d_a),
                v: (d_a, 1),
            },
            head: HeadParams {
                w_c: (d_m, 1),
                b_c: (1, 1),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Glorot,
    Zero,
    One,
}

fn init_kind(name: &str) -> Init {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gamma" => Init::One,
        "beta" | "b_e" | "b_t" | "b1" | "b2" | "b_c" => Init::Zero,
        _ => Init::Glorot,
    }
}

/// Half-width of the Glorot uniform interval for a fan_in × fan_out block.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Output nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub yhat: NodeId,
    pub pool_weights: NodeId,
    /// `attention[layer][head]`, each T × T.
    pub attention: Vec<Vec<NodeId>>,
}

impl ModelParams {
    pub fn shapes(config: &ModelConfig) -> ModelParams<(usize, usize)> {
        ModelParams::<(usize, usize)>::from_config(config)
    }

    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shapes(config).map(&mut |name, &(r, c)| {
            let data = match init_kind(&name) {
                Init::Zero => vec![0.0; r * c],
                Init::One => vec![1.0; r * c],
                Init::Glorot => {
                    let bound = glorot_bound(r, c);
                    (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            Tensor2::from_raw(r, c, data)
        });
        Ok(params)
    }

    pub fn attach(&self, tape: &mut Tape) -> ModelParams<NodeId> {
        self.map(&mut |_, t| tape.leaf(t.clone()))
    }

    /// Replaces every block, in canonical order, checking shapes.
    pub fn with_blocks(&self, blocks: &[Tensor2]) -> Result<Self> {
        let names = self.names();
        if blocks.len() != names.len() {
            return Err(Error::Shape {
                op: "ModelParams::with_blocks",
                left: format!("{} blocks", names.len()),
                right: format!("{} blocks", blocks.len()),
            });
        }
        let mut out = self.clone();
        let mut i = 0;
        let mut bad = None;
        out.for_each_mut(&mut |t| {
            if t.shape() != blocks[i].shape() && bad.is_none() {
                bad = Some((names[i].clone(), t.shape(), blocks[i].shape()));
            }
            *t = blocks[i].clone();
            i += 1;
        });
        if let Some((name, want, got)) = bad {
            return Err(Error::Shape {
                op: "ModelParams::with_blocks",
                left: format!("{name} {}x{}", want.0, want.1),
                right: format!("{}x{}", got.0, got.1),
            });
        }
        Ok(out)
    }

    pub fn predict(&self, seq: &VectorizedSequence) -> Result<f64> {
        self.predict_masked(&seq.x, &seq.dt, None)
    }

    pub fn predict_masked(&self, x: &Tensor2, dt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape);
        let out = forward(&mut tape, &nodes, x, dt, mask)?;
        Ok(tape.value(out.yhat).get(0, 0))
    }

    /// Predictions for every padded sequence of a batch.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        (0..batch.len())
            .into_par_iter()
            .map(|i| self.predict_masked(&batch.xs[i], &batch.dts[i], Some(&batch.masks[i])))
            .collect()
    }

    /// Mean loss over `seqs` on a single tape, and its gradient.
    pub fn loss_and_grads(
        &self,
        seqs: &[&VectorizedSequence],
        fault: Option<Fault>,
    ) -> Result<(f64, ModelParams)> {
        let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
        let nodes = self.attach(&mut tape);
        let loss = batch_loss(&mut tape, &nodes, seqs)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).get(0, 0);
        Ok((value, nodes.map(&mut |_, id| grads.get(*id))))
    }

    pub fn loss(&self, seqs: &[&VectorizedSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.attach(&mut tape);
        let loss = batch_loss(&mut tape, &nodes, seqs)?;
        Ok(tape.value(loss).get(0, 0))
    }
}

/// One forward pass. `mask` marks valid rows; `None` means all valid.
pub fn forward(
    tape: &mut Tape,
    nodes: &ModelParams<NodeId>,
    x: &Tensor2,
    dt: &[f64],
    mask: Option<&[bool]>,
) -> Result<Forward> {
    if dt.len() != x.rows() || mask.is_some_and(|m| m.len() != x.rows()) {
        return Err(Error::Shape {
            op: "forward",
            left: format!("X {}x{}", x.rows(), x.cols()),
            right: format!("dt {} / mask {:?}", dt.len(), mask.map(<[bool]>::len)),
        });
    }
    let xn = tape.leaf(x.clone());
    let h0 = embed_features(tape, xn, &nodes.embed)?;
    let tm = temporal_encode(tape, dt, &nodes.embed, nodes.config.dt_log1p)?;
    let h = combine(tape, h0, tm)?;
    let (h, attention) = encode(tape, h, &nodes.layers, mask)?;
    let a = pooling_weights(tape, h, &nodes.pool, mask)?;
    let z = pool(tape, h, a)?;
    let yhat = classify(tape, z, &nodes.head)?;
    Ok(Forward {
        yhat,
        pool_weights: a,
        attention,
    })
}

/// Mean binary cross-entropy over `seqs`, all sharing the attached parameters.
pub fn batch_loss(
    tape: &mut Tape,
    nodes: &ModelParams<NodeId>,
    seqs: &[&VectorizedSequence],
) -> Result<NodeId> {
    if seqs.is_empty() {
        return Err(Error::Data("loss over an empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for seq in seqs {
        let out = forward(tape, nodes, &seq.x, &seq.dt, None)?;
        let l = tape.bce(out.yhat, &[f64::from(seq.label)])?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / seqs.len() as f64))
}
