//! Central finite-difference audit of tape gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// A scalar function of a list of parameter blocks, with a tape gradient.
pub trait Objective: Sync {
    fn value(&self, blocks: &[Tensor2]) -> Result<f64>;

    /// Value plus one gradient tensor per block, in block order.
    fn value_and_grad(&self, blocks: &[Tensor2]) -> Result<(f64, Vec<Tensor2>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAudit {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat row-major index of the worst entry.
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
    /// Entries accepted only because the analytic value lies between the
    /// one-sided differences, i.e. the parameter sits on a kink.
    pub kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAuditReport {
    pub blocks: Vec<BlockAudit>,
    pub pass: bool,
    pub h: f64,
    pub tol: f64,
}

impl GradAuditReport {
    pub fn worst(&self) -> Option<&BlockAudit> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockAudit> {
        self.blocks.iter().filter(move |b| !(b.max_rel_error < self.tol))
    }
}

struct Probe {
    central: f64,
    forward: f64,
    backward: f64,
}

impl Probe {
    fn interval_error(&self, a: f64) -> f64 {
        let (lo, hi) = (self.forward.min(self.backward), self.forward.max(self.backward));
        let dist = (lo - a).max(a - hi).max(0.0);
        dist / a.abs().max(self.central.abs()).max(1e-12)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares every entry of every block's tape gradient against
/// `(f(θ+h′) − f(θ−h′)) / 2h′` with `h′ = h·max(1, |θ|)`.
///
/// Where `f` is not differentiable (a ReLU exactly at 0) the central
/// difference averages two slopes and matches no subgradient. An entry whose
/// analytic value lies between the forward and backward differences is
/// therefore scored by its distance to that interval instead. Away from kinks
/// the interval is only `O(h′)` wide, so this does not loosen the check.
pub fn grad_check<F: Objective>(
    f: &F,
    names: &[String],
    blocks: &[Tensor2],
    h: f64,
    tol: f64,
) -> Result<GradAuditReport> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {h}")));
    }
    if names.len() != blocks.len() {
        return Err(Error::Contract(format!(
            "{} names for {} blocks",
            names.len(),
            blocks.len()
        )));
    }
    let base = f.value(blocks)?;
    let again = f.value(blocks)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::AuditInvalid(format!(
            "objective is not deterministic: {base} then {again}"
        )));
    }
    let (_, analytic) = f.value_and_grad(blocks)?;
    if analytic.len() != blocks.len() {
        return Err(Error::Contract(format!(
            "objective returned {} gradients for {} blocks",
            analytic.len(),
            blocks.len()
        )));
    }

    let coords: Vec<(usize, usize)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, t)| (0..t.len()).map(move |k| (b, k)))
        .collect();

    let numeric: Vec<Probe> = coords
        .par_iter()
        .map_init(
            || blocks.to_vec(),
            |work, &(b, k)| -> Result<Probe> {
                let theta = blocks[b].data()[k];
                let step = h * theta.abs().max(1.0);
                work[b].data_mut()[k] = theta + step;
                let plus = f.value(work);
                work[b].data_mut()[k] = theta - step;
                let minus = f.value(work);
                work[b].data_mut()[k] = theta;
                let (plus, minus) = (plus?, minus?);
                Ok(Probe {
                    central: (plus - minus) / (2.0 * step),
                    forward: (plus - base) / step,
                    backward: (base - minus) / step,
                })
            },
        )
        .collect::<Result<_>>()?;

    let mut report_blocks: Vec<BlockAudit> = names
        .iter()
        .zip(blocks)
        .map(|(name, t)| BlockAudit {
            name: name.clone(),
            max_rel_error: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
            entries: t.len(),
            kinks: 0,
        })
        .collect();
    for (&(b, k), probe) in coords.iter().zip(&numeric) {
        let a = analytic[b].data()[k];
        let n = probe.central;
        let mut err = relative_error(a, n);
        let entry = &mut report_blocks[b];
        if !(err < tol) {
            let one_sided = probe.interval_error(a);
            if one_sided < tol {
                entry.kinks += 1;
                err = one_sided;
            }
        }
        if err > entry.max_rel_error || err.is_nan() {
            entry.max_rel_error = err;
            entry.argmax = k;
            entry.analytic = a;
            entry.numeric = n;
        }
    }
    let pass = report_blocks.iter().all(|b| b.max_rel_error < tol);
    Ok(GradAuditReport {
        blocks: report_blocks,
        pass,
        h,
        tol,
    })
}
