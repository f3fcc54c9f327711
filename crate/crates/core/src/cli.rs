//! The `clinrisk` command line. Results go to `--out` (or stdout), progress
//! and errors to stderr. Exit codes: 0 success, 1 usage error, 2 runtime
//! error or failed audit.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datagen::generate_cohort;
use crate::error::{Error, Result};
use crate::experiments::{run_comparison, sweep_contamination, sweep_heads, StudyConfig};
use crate::ingest::{parse_stream, vectorize, write_cohort, PatientSequence, VectorizedSequence};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{
    gradient_audit, infer_vocab, load_checkpoint, save_checkpoint, train, AUDIT_H, AUDIT_TOL,
};

#[derive(Parser, Debug)]
#[command(name = "clinrisk", version, about = "Transformer risk scoring for irregular patient event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Overrides the seed of the step being run (a single seed for experiments).
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with optional `gen`, `model`, `train` and `experiment` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort, one JSON patient per line.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Train on a cohort file and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the training history.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a checkpoint on a cohort file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference audit of every parameter gradient.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to audit; a fresh model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Cohort to draw the batch from; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = AUDIT_H)]
        h: f64,
        #[arg(long, default_value_t = AUDIT_TOL)]
        tol: f64,
    },
    /// Transformer vs mean-pooling MLP on the same splits.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy across attention head counts.
    SweepHeads {
        #[command(flatten)]
        common: Common,
        /// Comma-separated head counts.
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
    },
    /// Clean-test precision across training contamination ratios.
    SweepContamination {
        #[command(flatten)]
        common: Common,
        /// Comma-separated contamination ratios in [0, 1].
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
}

/// Model used by `audit` without a checkpoint or config file.
pub fn audit_preset() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        ffn_enabled: true,
        ..ModelConfig::default()
    }
}

pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(common: &Common, base: StudyConfig) -> Result<StudyConfig> {
    match &common.config {
        None => Ok(base),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }
}

fn read_cohort(path: &Path) -> Result<Vec<PatientSequence>> {
    let text = std::fs::read_to_string(path)?;
    let (cohort, errors) = parse_stream(text.lines());
    for e in &errors {
        eprintln!("skipped: {e}");
    }
    if cohort.is_empty() {
        return Err(Error::Data(format!("{} holds no valid patients", path.display())));
    }
    Ok(cohort)
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(out, &text)
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Generate { common, n_patients } => {
            let mut cfg = load_config(&common, StudyConfig::default())?;
            if let Some(s) = common.seed {
                cfg.gen.seed = s;
            }
            if let Some(n) = n_patients {
                cfg.gen.n_patients = n;
            }
            let cohort = generate_cohort(&cfg.gen)?;
            eprintln!("generated {} patients", cohort.len());
            emit_text(common.out.as_deref(), &write_cohort(&cohort))?;
        }
        Command::Train {
            common,
            data,
            history,
        } => {
            let mut cfg = load_config(&common, StudyConfig::default())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let cohort = read_cohort(&data)?;
            let trained = train(&cohort, &cfg.model, &cfg.train)?;
            let h = &trained.history;
            eprintln!(
                "trained {} epochs, best epoch {}, loss {:.4} -> {:.4}",
                h.stopped_epoch,
                h.best_epoch,
                h.initial_train_loss,
                h.final_train_loss()
            );
            let out = common.out.unwrap_or_else(|| PathBuf::from("model.json"));
            save_checkpoint(&trained.checkpoint(), &out)?;
            emit(history.as_deref(), h)?;
        }
        Command::Evaluate {
            common,
            model,
            data,
        } => {
            let ckpt = load_checkpoint(&model)?;
            let params = ckpt.model()?;
            let cohort = read_cohort(&data)?;
            let seqs = vectorize_all(&cohort, &ckpt.feature_space)?;
            let (_, preds) = crate::trainer::score(&params, &seqs)?;
            let labels: Vec<u8> = seqs.iter().map(|s| s.label).collect();
            let report = crate::metrics::evaluate(&preds, &labels, ckpt.train_config.threshold)?;
            emit(common.out.as_deref(), &report)?;
        }
        Command::Audit {
            common,
            model,
            data,
            batch,
            h,
            tol,
        } => {
            let base = StudyConfig {
                model: audit_preset(),
                ..StudyConfig::default()
            };
            let cfg = load_config(&common, base)?;
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let cohort = match &data {
                Some(p) => read_cohort(p)?,
                None => generate_cohort(&crate::datagen::GenConfig {
                    n_patients: batch.max(1),
                    ..cfg.gen.clone()
                })?,
            };
            let (params, fs) = match &model {
                Some(p) => {
                    let ckpt = load_checkpoint(p)?;
                    (ckpt.model()?, ckpt.feature_space)
                }
                None => {
                    let vocab = infer_vocab(&cohort, cfg.model.d_in)
                        .map(|v| v.max(cfg.gen.vocab_size))?;
                    let fs = crate::ingest::fit_feature_space(&cohort, vocab)?;
                    let mc = ModelConfig {
                        d_in: fs.d_in(),
                        ..cfg.model.clone()
                    };
                    (ModelParams::init(&mc, seed)?, fs)
                }
            };
            let take = batch.min(cohort.len());
            let seqs = vectorize_all(&cohort[..take], &fs)?;
            let report = gradient_audit(&params, &seqs, h, tol, None)?;
            emit(common.out.as_deref(), &report)?;
            if !report.pass {
                eprintln!("audit failed");
                return Ok(2);
            }
            eprintln!("audit passed: {} blocks", report.blocks.len());
        }
        Command::Compare { common } => {
            let cfg = experiment_config(&common)?;
            emit(common.out.as_deref(), &run_comparison(&cfg)?)?;
        }
        Command::SweepHeads { common, heads } => {
            let mut cfg = experiment_config(&common)?;
            if let Some(h) = heads {
                cfg.experiment.head_list = h;
            }
            emit(common.out.as_deref(), &sweep_heads(&cfg)?)?;
        }
        Command::SweepContamination { common, rhos } => {
            let mut cfg = experiment_config(&common)?;
            if let Some(r) = rhos {
                cfg.experiment.rho_list = r;
            }
            emit(common.out.as_deref(), &sweep_contamination(&cfg)?)?;
        }
    }
    Ok(0)
}

fn experiment_config(common: &Common) -> Result<StudyConfig> {
    let mut cfg = load_config(common, StudyConfig::standard())?;
    if let Some(s) = common.seed {
        cfg.experiment.seeds = vec![s];
    }
    Ok(cfg)
}

fn vectorize_all(
    cohort: &[PatientSequence],
    fs: &crate::ingest::FeatureSpace,
) -> Result<Vec<VectorizedSequence>> {
    cohort.iter().map(|s| vectorize(s, fs)).collect()
}
