//! Run configuration shared by the CLI, the training loop and evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetManifest, SplitCounts};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::pseudo_label::SEGMENT_SECONDS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_pretraining: bool,
    pub use_mutual_attention: bool,
    pub use_semantics_booster: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_pretraining: true,
            use_mutual_attention: true,
            use_semantics_booster: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub phase: Phase,
    pub ablation: AblationFlags,
    /// Stop when validation loss has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Stop once the training-set loss after an epoch falls below this value.
    pub target_loss: Option<f64>,
    /// Fine-tune only the classifier head.
    pub freeze_trunk: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            adam: AdamConfig::default(),
            seed: 0,
            phase: Phase::Finetune,
            ablation: AblationFlags::default(),
            patience: None,
            target_loss: None,
            freeze_trunk: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthMode {
    /// Average F over every (prediction, annotator) pair.
    PerAnnotator,
    /// Single comparison against the selection of the mean annotator score.
    Consensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub budget: f64,
    pub beta: f64,
    pub ground_truth: GroundTruthMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget: 0.15,
            beta: 1.0,
            ground_truth: GroundTruthMode::PerAnnotator,
        }
    }
}

/// Widths of the learned layers; feature width, vocabulary and class count come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub max_query_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            max_query_len: 64,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelDims,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub segment_seconds: u32,
    /// Video counts per split; `None` picks the published split or 80/10/10.
    pub split: Option<SplitCounts>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            segment_seconds: SEGMENT_SECONDS,
            split: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.segment_seconds != SEGMENT_SECONDS {
            return Err(Error::invalid(format!(
                "segment features are laid out in {SEGMENT_SECONDS}-second windows, got {}",
                self.segment_seconds
            )));
        }
        if !(self.eval.budget > 0.0 && self.eval.budget <= 1.0) {
            return Err(Error::invalid(format!("budget {} outside (0, 1]", self.eval.budget)));
        }
        if !(self.eval.beta > 0.0 && self.eval.beta.is_finite()) {
            return Err(Error::invalid(format!("beta {} must be positive", self.eval.beta)));
        }
        Ok(())
    }

    /// Canonical JSON, the input of [`RunConfig::hash`].
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn model_config(&self, manifest: &DatasetManifest) -> ModelConfig {
        ModelConfig {
            feature_dim: manifest.feature_dim,
            embed_dim: self.model.embed_dim,
            max_query_len: self.model.max_query_len,
            ffn_mult: self.model.ffn_mult,
            vocab_size: manifest.vocab_size,
            num_classes: manifest.num_classes,
            mutual_attention: self.train.ablation.use_mutual_attention,
            semantics_booster: self.train.ablation.use_semantics_booster,
        }
    }

    pub fn split_counts(&self, manifest: &DatasetManifest) -> SplitCounts {
        self.split
            .unwrap_or_else(|| SplitCounts::default_for(&manifest.dataset_name, manifest.videos.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_serialize_published_constants() {
        let v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json()).unwrap();
        assert_eq!(v["train"]["epochs"], 100);
        assert_eq!(v["train"]["adam"]["lr"], 1e-7);
        assert_eq!(v["eval"]["beta"], 1.0);
        assert_eq!(v["segment_seconds"], 2);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3, "adam": {"lr": 0.01, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.eval.budget, 0.15);
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"segment_seconds": 3}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
