use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use super::loss::Task;
use super::optim::OptimConfig;
use crate::audio::{FeatureStats, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Run-level settings outside the model, augmentation and optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub task: Task,
    /// Data-loading threads feeding the trainer.
    pub workers: usize,
    /// Capacity of each worker's batch queue.
    pub queue_depth: usize,
    /// JSON-lines manifest; relative paths resolve against its directory.
    pub manifest: Option<String>,
    /// Where the metric log and checkpoints go.
    pub out_dir: Option<String>,
    /// Split evaluated after every epoch; `null` disables evaluation.
    pub eval_split: Option<Split>,
    /// Input normalization; `null` leaves features as stored.
    pub norm: Option<FeatureStats>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            task: Task::Multilabel,
            workers: 2,
            queue_depth: 2,
            manifest: None,
            out_dir: None,
            eval_split: Some(Split::Val),
            norm: None,
        }
    }
}

/// Everything needed to reproduce a training run, as read from JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub train: RunConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment
            .validate(self.model.input_frames, self.model.input_bins)?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.workers == 0 || t.queue_depth == 0 {
            return Err(Error::Config(
                "epochs, batch_size, workers and queue_depth must be positive".into(),
            ));
        }
        if let Some(n) = t.norm {
            if !(n.std > 0.0) {
                return Err(Error::Config("norm.std must be positive".into()));
            }
        }
        if !(self.optim.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"optim": {"lr": 0.01}, "train": {"epochs": 3}}"#)
            .unwrap();
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.optim.weight_decay, 0.05);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.augment.time_mask, 192);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"optim": {"learning_rate": 1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"extra": 1}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn oversized_masks_are_rejected_for_small_inputs() {
        let json = r#"{"model": {"input_frames": 64, "input_bins": 16, "channels": [8,16,32,64],
            "depths": [1,1,1,1], "knn_k": 3, "top_k_centroids": 2, "num_centroids": 4,
            "stem_channels": [4,4,8,8], "head_hidden": 32}}"#;
        assert!(ExperimentConfig::from_json(json).is_err());
    }
}
