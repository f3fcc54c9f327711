use crate::error::Result;
use crate::ingest::VectorizedSequence;
use crate::model::ModelParams;
use crate::numcore::{grad_check, Fault, GradAuditReport, Objective, Tensor2};

pub const AUDIT_H: f64 = 1e-5;
pub const AUDIT_TOL: f64 = 1e-4;

struct BatchObjective<'a> {
    model: &'a ModelParams,
    batch: Vec<&'a VectorizedSequence>,
    fault: Option<Fault>,
}

impl Objective for BatchObjective<'_> {
    fn value(&self, blocks: &[Tensor2]) -> Result<f64> {
        self.model.with_blocks(blocks)?.loss(&self.batch)
    }

    fn value_and_grad(&self, blocks: &[Tensor2]) -> Result<(f64, Vec<Tensor2>)> {
        let (loss, grads) = self.model.with_blocks(blocks)?.loss_and_grads(&self.batch, self.fault)?;
        Ok((loss, grads.to_vec()))
    }
}

/// Checks the tape gradient of the mean batch loss against central
/// differences for every parameter block. `fault` corrupts the backward pass.
pub fn gradient_audit(
    model: &ModelParams,
    batch: &[VectorizedSequence],
    h: f64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<GradAuditReport> {
    let objective = BatchObjective {
        model,
        batch: batch.iter().collect(),
        fault,
    };
    grad_check(&objective, &model.names(), &model.to_vec(), h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn seqs() -> Vec<VectorizedSequence> {
        let x = |r: usize, seed: f64| {
            Tensor2::new(r, 5, (0..r * 5).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()).unwrap()
        };
        vec![
            VectorizedSequence { x: x(3, 0.0), dt: vec![0.0, 0.7, 2.1], label: 1 },
            VectorizedSequence { x: x(2, 5.0), dt: vec![0.0, 1.3], label: 0 },
        ]
    }

    fn model(ffn: bool) -> ModelParams {
        let cfg = ModelConfig {
            d_in: 5,
            d_model: 4,
            n_heads: 2,
            n_layers: 2,
            ffn_enabled: ffn,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    #[test]
    fn clean_model_passes() {
        for ffn in [true, false] {
            let r = gradient_audit(&model(ffn), &seqs(), AUDIT_H, AUDIT_TOL, None).unwrap();
            assert!(r.pass, "{:?}", r.worst());
            assert_eq!(r.blocks.len(), model(ffn).names().len());
        }
    }

    #[test]
    fn layer_norm_fault_is_caught() {
        let r = gradient_audit(
            &model(true),
            &seqs(),
            AUDIT_H,
            AUDIT_TOL,
            Some(Fault::LayerNormAffineGradScale(1.1)),
        )
        .unwrap();
        assert!(!r.pass);
        let failing: Vec<&str> = r.failing().map(|b| b.name.as_str()).collect();
        assert!(failing.iter().any(|n| n.contains("ln")), "{failing:?}");
        assert!(failing.iter().all(|n| n.contains("ln")), "{failing:?}");
    }
}
