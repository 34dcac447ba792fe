//! JSON experiment configuration. Missing keys take their defaults and
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchitectureId, INPUT_SHAPE};
use crate::preprocess::{NormalizationConstants, Pipeline};
use crate::training::TrainConfig;

/// Overrides applied to the base configuration to form one candidate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchitectureId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width_divisor: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze_backbone: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub image_resize: usize,
    pub crop: usize,
    pub normalization: NormalizationConstants,
    pub flip_probability: f64,
    pub architecture: ArchitectureId,
    pub width_divisor: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub repeats: usize,
    /// `None` holds out 20% of the corpus.
    pub test_count: Option<usize>,
    /// `None` holds out 8.9% of the corpus.
    pub val_count: Option<usize>,
    pub stratified: bool,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Alternative settings compared by validation accuracy; empty means
    /// the base configuration alone.
    pub candidates: Vec<CandidateOverrides>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pipeline = Pipeline::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            image_resize: pipeline.resize,
            crop: pipeline.crop,
            normalization: pipeline.constants,
            flip_probability: pipeline.flip_probability,
            architecture: train.architecture,
            width_divisor: train.width_divisor,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            repeats: train.repeats,
            test_count: None,
            val_count: None,
            stratified: true,
            seed: train.seed,
            freeze_backbone: train.freeze_backbone,
            data_root: None,
            output_dir: None,
            candidates: Vec::new(),
        }
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{key} must be at least 1, got 0")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop != INPUT_SHAPE[1] {
            return Err(Error::Config(format!("crop must be {} to match the model input, got {}", INPUT_SHAPE[1], self.crop)));
        }
        if self.image_resize < self.crop {
            return Err(Error::Config(format!("image_resize must be at least crop ({}), got {}", self.crop, self.image_resize)));
        }
        for (c, &s) in self.normalization.std.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("normalization.std[{c}] must be positive, got {s}")));
            }
        }
        if let Some(c) = self.normalization.mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::Config(format!("normalization.mean[{c}] must be finite")));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!("flip_probability must lie in [0, 1], got {}", self.flip_probability)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        positive("width_divisor", self.width_divisor)?;
        positive("batch_size", self.batch_size)?;
        positive("max_epochs", self.max_epochs)?;
        positive("patience", self.patience)?;
        positive("repeats", self.repeats)?;
        for (i, c) in self.candidates.iter().enumerate() {
            self.apply(c).validate().map_err(|e| Error::Config(format!("candidates[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            resize: self.image_resize,
            crop: self.crop,
            constants: self.normalization,
            flip_probability: self.flip_probability,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            architecture: self.architecture,
            width_divisor: self.width_divisor,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            repeats: self.repeats,
            seed: self.seed,
            freeze_backbone: self.freeze_backbone,
        }
    }

    fn apply(&self, o: &CandidateOverrides) -> ExperimentConfig {
        let mut c = self.clone();
        c.candidates.clear();
        c.architecture = o.architecture.unwrap_or(c.architecture);
        c.width_divisor = o.width_divisor.unwrap_or(c.width_divisor);
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.momentum = o.momentum.unwrap_or(c.momentum);
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.freeze_backbone = o.freeze_backbone.unwrap_or(c.freeze_backbone);
        c
    }

    /// The training configurations to compare.
    pub fn candidate_configs(&self) -> Vec<TrainConfig> {
        if self.candidates.is_empty() {
            vec![self.train_config()]
        } else {
            self.candidates.iter().map(|o| self.apply(o).train_config()).collect()
        }
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let t = c.train_config();
        assert_eq!((t.learning_rate, t.momentum, t.batch_size, t.max_epochs, t.patience, t.repeats), (0.001, 0.9, 4, 500, 5, 5));
        assert_eq!((c.image_resize, c.crop), (256, 224));
        assert_eq!(c.normalization.mean, [0.485, 0.456, 0.406]);
        assert_eq!(c.normalization.std, [0.229, 0.224, 0.225]);
    }

    #[test]
    fn constraint_errors_name_the_key() {
        let err = ExperimentConfig::from_json(r#"{"learning_rate": -1}"#).unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("positive"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"crop": 200}"#).unwrap_err().to_string();
        assert!(err.contains("crop"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"normalization": {"mean": [0,0,0], "std": [1,0,1]}}"#).unwrap_err().to_string();
        assert!(err.contains("normalization.std[1]"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_json(r#"{"learnig_rate": 0.001}"#).unwrap_err().to_string();
        assert!(err.contains("learnig_rate"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"candidates": [{"lr": 0.1}]}"#).unwrap_err().to_string();
        assert!(err.contains("lr"), "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig { seed: 9, architecture: ArchitectureId::AlexNet, test_count: Some(10), ..Default::default() };
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn candidates_inherit_the_base() {
        let c = ExperimentConfig::from_json(r#"{"seed": 3, "candidates": [{"learning_rate": 0.01}, {"momentum": 0.5}]}"#).unwrap();
        let cs = c.candidate_configs();
        assert_eq!(cs.len(), 2);
        assert_eq!((cs[0].learning_rate, cs[0].momentum, cs[0].seed), (0.01, 0.9, 3));
        assert_eq!((cs[1].learning_rate, cs[1].momentum), (0.001, 0.5));
        assert!(ExperimentConfig::from_json(r#"{"candidates": [{"momentum": 1.5}]}"#).is_err());
    }
}
