use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::VectorizedSequence;
use crate::model::glorot_bound;
use crate::numcore::{NodeId, Tape, Tensor2};
use crate::trainer::Learner;

pub const MLP_HIDDEN: [usize; 2] = [64, 32];

/// Baseline that averages a sequence's rows, discarding order and timing,
/// then applies `relu(64) → relu(32) → sigmoid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBaseline {
    /// `[w1, b1, w2, b2, w3, b3]`.
    pub blocks: Vec<Tensor2>,
}

impl MlpBaseline {
    pub fn init(d_in: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [d_in, MLP_HIDDEN[0], MLP_HIDDEN[1], 1];
        let mut blocks = Vec::with_capacity(6);
        for w in widths.windows(2) {
            let bound = glorot_bound(w[0], w[1]);
            let data = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
            blocks.push(Tensor2::new(w[0], w[1], data).expect("finite draws"));
            blocks.push(Tensor2::zeros(1, w[1]));
        }
        Self { blocks }
    }

    fn forward(&self, tape: &mut Tape, seq: &VectorizedSequence) -> Result<(NodeId, Vec<NodeId>)> {
        let ids: Vec<NodeId> = self.blocks.iter().map(|b| tape.leaf(b.clone())).collect();
        let x = tape.leaf(mean_row(&seq.x)?);
        let mut h = x;
        for (layer, pair) in ids.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = if layer < 2 { tape.relu(z) } else { tape.sigmoid(z) };
        }
        Ok((h, ids))
    }
}

fn mean_row(x: &Tensor2) -> Result<Tensor2> {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let n = x.rows() as f64;
    Tensor2::row_vector(&out.iter().map(|v| v / n).collect::<Vec<_>>())
}

impl Learner for MlpBaseline {
    fn blocks_mut(&mut self) -> Vec<&mut Tensor2> {
        self.blocks.iter_mut().collect()
    }

    fn loss_grad(&self, seq: &VectorizedSequence) -> Result<(f64, Vec<Tensor2>)> {
        let mut tape = Tape::new();
        let (yhat, ids) = self.forward(&mut tape, seq)?;
        let loss = tape.bce(yhat, &[f64::from(seq.label)])?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).get(0, 0), ids.iter().map(|id| grads.get(*id)).collect()))
    }

    fn predict(&self, seq: &VectorizedSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let (yhat, _) = self.forward(&mut tape, seq)?;
        Ok(tape.value(yhat).get(0, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Objective};

    fn seq(rows: &[[f64; 3]], label: u8) -> VectorizedSequence {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        VectorizedSequence {
            x: Tensor2::new(rows.len(), 3, data).unwrap(),
            dt: vec![0.0; rows.len()],
            label,
        }
    }

    #[test]
    fn order_and_timing_are_invisible() {
        let m = MlpBaseline::init(3, 4);
        let a = seq(&[[1.0, 0.0, 0.5], [0.0, 1.0, -2.0]], 1);
        let mut b = seq(&[[0.0, 1.0, -2.0], [1.0, 0.0, 0.5]], 1);
        b.dt = vec![0.0, 40.0];
        assert_eq!(m.predict(&a).unwrap(), m.predict(&b).unwrap());
    }

    #[test]
    fn shapes_and_zero_biases() {
        let m = MlpBaseline::init(5, 1);
        let shapes: Vec<_> = m.blocks.iter().map(Tensor2::shape).collect();
        assert_eq!(shapes, [(5, 64), (1, 64), (64, 32), (1, 32), (32, 1), (1, 1)]);
        assert!(m.blocks[1].data().iter().all(|v| *v == 0.0));
    }

    struct Probe(VectorizedSequence);

    impl Objective for Probe {
        fn value(&self, blocks: &[Tensor2]) -> Result<f64> {
            Ok(self.value_and_grad(blocks)?.0)
        }

        fn value_and_grad(&self, blocks: &[Tensor2]) -> Result<(f64, Vec<Tensor2>)> {
            MlpBaseline { blocks: blocks.to_vec() }.loss_grad(&self.0)
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = MlpBaseline::init(3, 9);
        let probe = Probe(seq(&[[1.0, 0.2, 0.5], [0.0, 1.0, -2.0]], 1));
        let names: Vec<String> = (0..6).map(|i| format!("mlp{i}")).collect();
        let r = grad_check(&probe, &names, &m.blocks, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{:?}", r.worst());
    }
}
