use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::ingest::FeatureSpace;
use crate::metrics::MetricsReport;
use crate::model::{ModelConfig, ModelParams};
use crate::numcore::Tensor2;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedBlock {
    pub name: String,
    pub tensor: Tensor2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub feature_space: FeatureSpace,
    pub params: Vec<NamedBlock>,
    pub metrics_at_best: Option<MetricsReport>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        features: &FeatureSpace,
        train_config: &TrainConfig,
        metrics_at_best: Option<MetricsReport>,
    ) -> Self {
        let mut blocks = Vec::new();
        params.map(&mut |name, t| {
            blocks.push(NamedBlock {
                name,
                tensor: t.clone(),
            })
        });
        Self {
            format_version: FORMAT_VERSION,
            model_config: params.config.clone(),
            train_config: train_config.clone(),
            seed: train_config.seed,
            feature_space: features.clone(),
            params: blocks,
            metrics_at_best,
        }
    }

    /// Rebuilds the parameters, checking every block name and shape.
    pub fn model(&self) -> Result<ModelParams> {
        let cfg = &self.model_config;
        cfg.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        if cfg.d_in != self.feature_space.d_in() {
            return Err(Error::Integrity(format!(
                "d_in {} does not match feature space width {}",
                cfg.d_in,
                self.feature_space.d_in()
            )));
        }
        let shapes = ModelParams::shapes(cfg);
        let names = shapes.names();
        if names.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter blocks, found {}",
                names.len(),
                self.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for ((name, shape), block) in names.iter().zip(shapes.to_vec()).zip(&self.params) {
            if *name != block.name || shape != block.tensor.shape() {
                return Err(Error::Integrity(format!(
                    "block {} {:?} where {name} {shape:?} was expected",
                    block.name,
                    block.tensor.shape()
                )));
            }
            tensors.push(block.tensor.clone());
        }
        let zeros = ModelParams::init(cfg, 0)?;
        zeros
            .with_blocks(&tensors)
            .map_err(|e| Error::Integrity(e.to_string()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("unreadable checkpoint: {e}")))?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::Version {
            found: found.unwrap_or(0),
            expected: u64::from(FORMAT_VERSION),
        });
    }
    let ckpt: Checkpoint =
        serde_json::from_value(value).map_err(|e| Error::Integrity(format!("malformed checkpoint: {e}")))?;
    ckpt.model()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::fit_feature_space;
    use crate::datagen::{generate_cohort, GenConfig};

    fn sample() -> Checkpoint {
        let cohort = generate_cohort(&GenConfig {
            n_patients: 5,
            vocab_size: 6,
            cont_dim: 2,
            risk_code: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let fs = fit_feature_space(&cohort, 6).unwrap();
        let cfg = ModelConfig {
            d_in: fs.d_in(),
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        Checkpoint::new(&params, &fs, &TrainConfig::default(), None)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), ck.model().unwrap());
    }

    #[test]
    fn version_and_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut ck = sample();
        ck.format_version = 2;
        save_checkpoint(&ck, &path).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { .. })));

        save_checkpoint(&sample(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn wrong_block_shape_is_integrity_error() {
        let mut ck = sample();
        ck.params[0].tensor = Tensor2::zeros(1, 1);
        assert!(matches!(ck.model(), Err(Error::Integrity(_))));
    }
}
