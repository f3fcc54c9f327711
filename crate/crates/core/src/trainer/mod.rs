//! Mini-batch Adam training with validation early stopping, checkpoints and
//! the finite-difference gradient audit.

mod adam;
mod audit;
mod checkpoint;

pub use adam::{adam_step, OptimState};
pub use audit::{gradient_audit, AUDIT_H, AUDIT_TOL};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::bce_loss;
use crate::ingest::{fit_feature_space, vectorize, FeatureSpace, PatientSequence, VectorizedSequence};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{ModelConfig, ModelParams};
use crate::numcore::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            val_fraction: 0.2,
            seed: 42,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Anything trainable by [`fit`]: a fixed list of parameter blocks, a
/// per-sequence loss gradient and a risk prediction.
pub trait Learner: Clone + Send + Sync {
    fn blocks_mut(&mut self) -> Vec<&mut Tensor2>;
    /// BCE of one sequence and its gradient, blocks in `blocks_mut` order.
    fn loss_grad(&self, seq: &VectorizedSequence) -> Result<(f64, Vec<Tensor2>)>;
    fn predict(&self, seq: &VectorizedSequence) -> Result<f64>;
}

impl Learner for ModelParams {
    fn blocks_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |t| out.push(t));
        out
    }

    fn loss_grad(&self, seq: &VectorizedSequence) -> Result<(f64, Vec<Tensor2>)> {
        let (loss, grads) = self.loss_and_grads(&[seq], None)?;
        Ok((loss, grads.to_vec()))
    }

    fn predict(&self, seq: &VectorizedSequence) -> Result<f64> {
        ModelParams::predict(self, seq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Train-split loss of the initial parameters.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 means the initial ones).
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }
}

/// Mean loss and predictions of `model` over `seqs`.
pub fn score<L: Learner>(model: &L, seqs: &[VectorizedSequence]) -> Result<(f64, Vec<f64>)> {
    let preds: Vec<f64> = seqs
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = seqs.iter().map(|s| s.label).collect();
    Ok((bce_loss(&preds, &labels)?, preds))
}

fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

/// Trains `model` on `train`, stopping once validation loss has not improved
/// for `patience` epochs. Returns the parameters of the best epoch.
///
/// Per-sequence gradients within a batch are computed in parallel and summed
/// in batch order, so results do not depend on the thread count.
pub fn fit<L: Learner>(
    mut model: L,
    train: &[VectorizedSequence],
    val: &[VectorizedSequence],
    cfg: &TrainConfig,
) -> Result<(L, TrainHistory)> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} training sequences do not fill one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let val_labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let (initial_train_loss, _) = score(&model, train)?;
    check_loss(0, initial_train_loss)?;
    let (initial_val_loss, _) = score(&model, val)?;

    let mut state = OptimState::new(&model.blocks_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (initial_val_loss, 0, model.clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let per_seq: Vec<(f64, Vec<Tensor2>)> = chunk
                .par_iter()
                .map(|&i| model.loss_grad(&train[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut iter = per_seq.into_iter();
            let (mut loss, mut grads) = iter.next().expect("chunks are non-empty");
            for (l, g) in iter {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            loss *= scale;
            check_loss(epoch, loss)?;
            let grads: Vec<Tensor2> = grads.iter().map(|g| g.scaled(scale)).collect();
            adam_step(&mut model.blocks_mut(), &grads, &mut state, cfg)?;
            loss_sum += loss;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let (val_loss, preds) = score(&model, val)?;
        check_loss(epoch, val_loss)?;
        let val_metrics = evaluate(&preds, &val_labels, cfg.threshold)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let stopped_epoch = epochs.len();
    let (_, best_epoch, best_model) = best;
    Ok((
        best_model,
        TrainHistory {
            initial_train_loss,
            initial_val_loss,
            epochs,
            best_epoch,
            stopped_epoch,
        },
    ))
}

/// Seeded split of `n` indices into (train, validation).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Vocabulary size implied by a config and cohort: taken from `d_in` when it
/// is set, otherwise one past the largest code seen.
pub fn infer_vocab(cohort: &[PatientSequence], d_in: usize) -> Result<usize> {
    let max_code = cohort
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.code as usize))
        .max()
        .ok_or_else(|| Error::Data("cohort has no events".into()))?;
    if d_in == 0 {
        return Ok(max_code + 1);
    }
    let first = &cohort[0];
    let width = first.events.first().map_or(0, |e| e.values.len())
        + first.static_features.as_ref().map_or(0, Vec::len);
    match d_in.checked_sub(width) {
        Some(v) if v > max_code => Ok(v),
        _ => Err(Error::Config(format!(
            "d_in = {d_in} leaves no room for code {max_code} beside {width} value columns"
        ))),
    }
}

/// Feature space, train and validation sequences for a cohort.
pub fn prepare(
    cohort: &[PatientSequence],
    d_in: usize,
    cfg: &TrainConfig,
) -> Result<(FeatureSpace, Vec<VectorizedSequence>, Vec<VectorizedSequence>)> {
    let (tr, va) = split_indices(cohort.len(), cfg.val_fraction, cfg.seed);
    let train_part: Vec<PatientSequence> = tr.iter().map(|&i| cohort[i].clone()).collect();
    let fs = fit_feature_space(&train_part, infer_vocab(cohort, d_in)?)?;
    let vec_all = |ids: &[usize]| -> Result<Vec<VectorizedSequence>> {
        ids.iter().map(|&i| vectorize(&cohort[i], &fs)).collect()
    };
    let (train, val) = (vec_all(&tr)?, vec_all(&va)?);
    Ok((fs, train, val))
}

/// A fitted transformer with the feature space its inputs were normalized by.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub features: FeatureSpace,
    pub history: TrainHistory,
    pub train_config: TrainConfig,
}

impl TrainedModel {
    pub fn predict_patient(&self, seq: &PatientSequence) -> Result<f64> {
        self.params.predict(&vectorize(seq, &self.features)?)
    }

    pub fn evaluate(&self, cohort: &[PatientSequence]) -> Result<MetricsReport> {
        let seqs: Vec<VectorizedSequence> = cohort
            .iter()
            .map(|s| vectorize(s, &self.features))
            .collect::<Result<_>>()?;
        let (_, preds) = score(&self.params, &seqs)?;
        let labels: Vec<u8> = seqs.iter().map(|s| s.label).collect();
        evaluate(&preds, &labels, self.train_config.threshold)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.params,
            &self.features,
            &self.train_config,
            self.history.best().map(|e| e.val_metrics),
        )
    }
}

/// Splits, normalizes, initializes and fits a transformer on `cohort`.
pub fn train(cohort: &[PatientSequence], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    model_cfg.encoder().validate()?;
    let (features, train_seqs, val_seqs) = prepare(cohort, model_cfg.d_in, cfg)?;
    let config = ModelConfig {
        d_in: features.d_in(),
        ..model_cfg.clone()
    };
    let init = ModelParams::init(&config, cfg.seed)?;
    let (params, history) = fit(init, &train_seqs, &val_seqs, cfg)?;
    Ok(TrainedModel {
        params,
        features,
        history,
        train_config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_cohort, GenConfig};

    fn small_cohort(n: usize, seed: u64) -> Vec<PatientSequence> {
        generate_cohort(&GenConfig {
            n_patients: n,
            len_min: 3,
            len_max: 8,
            vocab_size: 12,
            cont_dim: 3,
            risk_code: 2,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 5e-3,
            batch_size: 8,
            max_epochs: epochs,
            patience: epochs,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let cohort = small_cohort(80, 9);
        let a = train(&cohort, &small_model(), &quick(6)).unwrap();
        let b = train(&cohort, &small_model(), &quick(6)).unwrap();
        assert_eq!(a, b);
        assert!(a.history.final_train_loss() < a.history.initial_train_loss);
    }

    #[test]
    fn best_epoch_parameters_are_kept() {
        let cohort = small_cohort(60, 4);
        let m = train(&cohort, &small_model(), &quick(5)).unwrap();
        let (_, _, val) = prepare(&cohort, 0, &m.train_config).unwrap();
        let (val_loss, _) = score(&m.params, &val).unwrap();
        let best = m
            .history
            .best()
            .map_or(m.history.initial_val_loss, |e| e.val_loss);
        assert!((val_loss - best).abs() < 1e-12);
        assert!(m.history.stopped_epoch <= 5);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let cohort = small_cohort(60, 5);
        let cfg = TrainConfig {
            lr: 0.5,
            patience: 1,
            max_epochs: 30,
            ..quick(30)
        };
        let m = train(&cohort, &small_model(), &cfg);
        if let Ok(m) = m {
            let h = &m.history;
            assert!(h.stopped_epoch <= h.best_epoch + 1);
        }
    }

    #[test]
    fn cohort_smaller_than_batch_is_rejected() {
        let cohort = small_cohort(10, 1);
        let cfg = TrainConfig {
            batch_size: 32,
            ..quick(2)
        };
        assert!(matches!(train(&cohort, &small_model(), &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn single_class_labels_train() {
        let mut cohort = small_cohort(40, 2);
        cohort.iter_mut().for_each(|s| s.label = 0);
        let m = train(&cohort, &small_model(), &quick(2)).unwrap();
        assert!(m.history.initial_train_loss.is_finite());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_indices(100, 0.2, 7);
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(split_indices(100, 0.2, 7), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn vocab_inference() {
        let cohort = small_cohort(20, 1);
        assert!(infer_vocab(&cohort, 0).unwrap() <= 12);
        assert_eq!(infer_vocab(&cohort, 15).unwrap(), 12);
        assert!(infer_vocab(&cohort, 4).is_err());
    }
}
