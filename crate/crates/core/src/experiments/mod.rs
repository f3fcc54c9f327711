//! Model-vs-baseline comparison and the head-count and contamination sweeps.
//!
//! Every cell trains on a development cohort and reports metrics on a
//! disjoint, never-contaminated test cohort drawn from the same generator.

mod mlp;

pub use mlp::{MlpBaseline, MLP_HIDDEN};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{contaminate, generate_cohort, ContaminationSpec, GenConfig};
use crate::error::{Error, Result};
use crate::ingest::{vectorize, PatientSequence, VectorizedSequence};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{fit, prepare, score, train, Learner, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Test patients generated after the `gen.n_patients` development ones.
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub head_list: Vec<usize>,
    /// Model width for the head sweep; must be divisible by every head count.
    pub sweep_d_model: usize,
    pub rho_list: Vec<f64>,
    pub noise_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_test: 500,
            seeds: vec![1, 2, 3],
            head_list: vec![2, 4, 6, 8, 10, 12],
            sweep_d_model: 120,
            rho_list: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
            noise_sigma: 10.0,
        }
    }
}

/// Everything an experiment depends on; echoed into every result file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl StudyConfig {
    /// Defaults with a 2000-patient development cohort.
    pub fn standard() -> Self {
        Self {
            gen: GenConfig {
                n_patients: 2000,
                ..GenConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.encoder().validate()?;
        self.train.validate()?;
        if self.experiment.n_test == 0 {
            return Err(Error::Config("n_test must be positive".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Development and test cohorts: one generator run split by patient index.
pub fn cohorts(gen: &GenConfig, n_test: usize) -> Result<(Vec<PatientSequence>, Vec<PatientSequence>)> {
    let mut all = generate_cohort(&GenConfig {
        n_patients: gen.n_patients + n_test,
        ..gen.clone()
    })?;
    let test = all.split_off(gen.n_patients);
    Ok((all, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

/// Per-group aggregate over the cells that completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub acc: Option<MeanStd>,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub f1: Option<MeanStd>,
}

impl MetricSummary {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let reports: Vec<&MetricsReport> = reports.into_iter().collect();
        let col = |f: fn(&MetricsReport) -> f64| {
            MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        Self {
            n: reports.len(),
            acc: col(|r| r.acc),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
        }
    }
}

/// One (value, seed) cell. Exactly one of `metrics` and `error` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGroup {
    pub value: f64,
    pub summary: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// `"heads"` or `"contamination"`.
    pub swept: String,
    pub config: StudyConfig,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepGroup>,
}

impl SweepResult {
    fn assemble(swept: &str, config: &StudyConfig, values: &[f64], rows: Vec<SweepRow>) -> Self {
        let summary = values
            .iter()
            .map(|&value| SweepGroup {
                value,
                summary: MetricSummary::of(
                    rows.iter()
                        .filter(|r| r.value == value)
                        .filter_map(|r| r.metrics.as_ref()),
                ),
            })
            .collect();
        Self {
            swept: swept.into(),
            config: config.clone(),
            rows,
            summary,
        }
    }

    pub fn group(&self, value: f64) -> Option<&MetricSummary> {
        self.summary.iter().find(|g| g.value == value).map(|g| &g.summary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// `"transformer"` or `"mlp"`.
    pub model: String,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub config: StudyConfig,
    pub rows: Vec<ComparisonRow>,
    pub transformer: MetricSummary,
    pub mlp: MetricSummary,
}

fn test_metrics<L: Learner>(model: &L, test: &[VectorizedSequence], threshold: f64) -> Result<MetricsReport> {
    let (_, preds) = score(model, test)?;
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    evaluate(&preds, &labels, threshold)
}

/// Trains the transformer on `dev` and scores it on `test`.
pub fn transformer_cell(
    dev: &[PatientSequence],
    test: &[PatientSequence],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let trained = train(dev, model, cfg)?;
    trained.evaluate(test)
}

/// Trains the mean-pooling MLP on the same split and normalization.
pub fn mlp_cell(
    dev: &[PatientSequence],
    test: &[PatientSequence],
    d_in: usize,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let (fs, train_seqs, val_seqs) = prepare(dev, d_in, cfg)?;
    let test_seqs: Vec<VectorizedSequence> = test
        .iter()
        .map(|s| vectorize(s, &fs))
        .collect::<Result<_>>()?;
    let (model, _) = fit(MlpBaseline::init(fs.d_in(), cfg.seed), &train_seqs, &val_seqs, cfg)?;
    test_metrics(&model, &test_seqs, cfg.threshold)
}

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

fn split(r: Result<MetricsReport>) -> (Option<MetricsReport>, Option<String>) {
    match r {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Transformer and MLP rows for every seed. A failing seed is recorded in
/// its row and does not stop the others.
pub fn run_comparison(config: &StudyConfig) -> Result<ComparisonResult> {
    config.validate()?;
    let (dev, test) = cohorts(&config.gen, config.experiment.n_test)?;
    let cells: Vec<(&str, u64)> = config
        .experiment
        .seeds
        .iter()
        .flat_map(|&s| [("transformer", s), ("mlp", s)])
        .collect();
    let rows: Vec<ComparisonRow> = cells
        .par_iter()
        .map(|&(kind, seed)| {
            let cfg = seeded(&config.train, seed);
            let result = if kind == "transformer" {
                transformer_cell(&dev, &test, &config.model, &cfg)
            } else {
                mlp_cell(&dev, &test, config.model.d_in, &cfg)
            };
            let (metrics, error) = split(result);
            ComparisonRow {
                model: kind.into(),
                seed,
                metrics,
                error,
            }
        })
        .collect();
    let summary = |kind: &str| {
        MetricSummary::of(
            rows.iter()
                .filter(|r| r.model == kind)
                .filter_map(|r| r.metrics.as_ref()),
        )
    };
    Ok(ComparisonResult {
        config: config.clone(),
        transformer: summary("transformer"),
        mlp: summary("mlp"),
        rows,
    })
}

fn sweep<F>(config: &StudyConfig, values: &[f64], swept: &str, cell: F) -> Result<SweepResult>
where
    F: Fn(f64, u64) -> Result<MetricsReport> + Sync,
{
    let cells: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| config.experiment.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(value, seed)| {
            let (metrics, error) = split(cell(value, seed));
            SweepRow {
                value,
                seed,
                metrics,
                error,
            }
        })
        .collect();
    Ok(SweepResult::assemble(swept, config, values, rows))
}

/// One train/test run per (head count, seed) at `sweep_d_model`. Every head
/// count is checked against the width before any training starts.
pub fn sweep_heads(config: &StudyConfig) -> Result<SweepResult> {
    config.validate()?;
    let exp = &config.experiment;
    if exp.head_list.is_empty() {
        return Err(Error::Config("head_list is empty".into()));
    }
    let models: Vec<ModelConfig> = exp
        .head_list
        .iter()
        .map(|&n_heads| ModelConfig {
            d_model: exp.sweep_d_model,
            n_heads,
            ..config.model.clone()
        })
        .collect();
    for m in &models {
        m.encoder().validate()?;
    }
    let (dev, test) = cohorts(&config.gen, exp.n_test)?;
    let values: Vec<f64> = exp.head_list.iter().map(|&h| h as f64).collect();
    sweep(config, &values, "heads", |value, seed| {
        let model = models
            .iter()
            .find(|m| m.n_heads as f64 == value)
            .expect("value comes from head_list");
        transformer_cell(&dev, &test, model, &seeded(&config.train, seed))
    })
}

/// One run per (rho, seed): the development cohort is contaminated, the test
/// cohort is left clean.
pub fn sweep_contamination(config: &StudyConfig) -> Result<SweepResult> {
    config.validate()?;
    let exp = &config.experiment;
    if exp.rho_list.is_empty() {
        return Err(Error::Config("rho_list is empty".into()));
    }
    let spec = |rho: f64, seed: u64| ContaminationSpec {
        rho,
        noise_sigma: exp.noise_sigma,
        seed,
    };
    for &rho in &exp.rho_list {
        spec(rho, 0).validate()?;
    }
    let (dev, test) = cohorts(&config.gen, exp.n_test)?;
    sweep(config, &exp.rho_list, "contamination", |rho, seed| {
        let noisy = contaminate(&dev, &spec(rho, seed))?;
        transformer_cell(&noisy, &test, &config.model, &seeded(&config.train, seed))
    })
}

/// Prediction weights for inspection: `(yhat, pooling weights, attention)`
/// of one patient under a trained or fresh model.
pub fn explain(params: &ModelParams, seq: &VectorizedSequence) -> Result<(f64, Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    let mut tape = crate::numcore::Tape::new();
    let nodes = params.attach(&mut tape);
    let out = crate::model::forward(&mut tape, &nodes, &seq.x, &seq.dt, None)?;
    let attention = out
        .attention
        .iter()
        .map(|layer| layer.iter().map(|h| tape.value(*h).data().to_vec()).collect())
        .collect();
    Ok((
        tape.value(out.yhat).get(0, 0),
        tape.value(out.pool_weights).data().to_vec(),
        attention,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> StudyConfig {
        StudyConfig {
            gen: GenConfig {
                n_patients: 40,
                len_min: 2,
                len_max: 6,
                vocab_size: 10,
                cont_dim: 2,
                risk_code: 3,
                ..GenConfig::default()
            },
            model: ModelConfig {
                d_model: 4,
                n_heads: 2,
                n_layers: 1,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 8,
                max_epochs: 2,
                ..TrainConfig::default()
            },
            experiment: ExperimentConfig {
                n_test: 10,
                seeds: vec![1, 2],
                head_list: vec![1, 2, 3, 6],
                sweep_d_model: 6,
                rho_list: vec![0.0, 0.5],
                noise_sigma: 10.0,
            },
        }
    }

    #[test]
    fn cohorts_are_disjoint_prefix_split() {
        let (dev, test) = cohorts(&tiny().gen, 10).unwrap();
        assert_eq!((dev.len(), test.len()), (40, 10));
        assert_eq!(dev, generate_cohort(&tiny().gen).unwrap());
        assert_eq!(test[0].patient_id, "p000040");
    }

    #[test]
    fn comparison_has_two_rows_per_seed_and_is_reproducible() {
        let a = run_comparison(&tiny()).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert!(a.rows.iter().all(|r| r.metrics.is_some()));
        assert_eq!(a.transformer.n, 2);
        let b = run_comparison(&tiny()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn failing_seed_is_recorded_not_fatal() {
        let mut cfg = tiny();
        cfg.train.batch_size = 100;
        let r = run_comparison(&cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.error.is_some() && row.metrics.is_none()));
        assert_eq!(r.transformer.n, 0);
        assert!(r.transformer.acc.is_none());
    }

    #[test]
    fn head_sweep_rows_and_validation() {
        let r = sweep_heads(&tiny()).unwrap();
        assert_eq!(r.rows.len(), 8);
        assert_eq!(r.summary.len(), 4);
        let mut bad = tiny();
        bad.experiment.head_list = vec![2, 4];
        assert!(matches!(sweep_heads(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_contamination_matches_plain_training() {
        let cfg = tiny();
        let r = sweep_contamination(&cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        let (dev, test) = cohorts(&cfg.gen, cfg.experiment.n_test).unwrap();
        for row in r.rows.iter().filter(|row| row.value == 0.0) {
            let plain = transformer_cell(&dev, &test, &cfg.model, &seeded(&cfg.train, row.seed)).unwrap();
            assert_eq!(row.metrics.unwrap(), plain);
        }
        let mut bad = cfg;
        bad.experiment.rho_list = vec![0.1, 1.5];
        assert!(sweep_contamination(&bad).is_err());
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }
}
