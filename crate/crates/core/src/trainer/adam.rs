use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor2;

/// First and second moment accumulators, one per parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &[&mut Tensor2]) -> Self {
        let zeros: Vec<Tensor2> = params
            .iter()
            .map(|p| Tensor2::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, with the correction folded into the step
/// size: `θ ← θ − lr·√(1−β₂ᵗ)/(1−β₁ᵗ) · m / (√v + ε)`.
pub fn adam_step(
    params: &mut [&mut Tensor2],
    grads: &[Tensor2],
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: format!("{} parameter blocks", params.len()),
            right: format!("{} gradients / {} moments", grads.len(), state.m.len()),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let step = cfg.lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * gk;
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * gk * gk;
            pd[k] -= step * md[k] / (vd[k].sqrt() + cfg.eps);
        }
    }
    Ok(())
}
