//! Training configuration: a flat key-value file (TOML or JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth_gt::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SsimConstants};
use crate::mda::AttentionScale;
use crate::model::{Fusion, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 32x32 inputs, 4x4 patch grid, six-block backbone.
    #[default]
    Mini,
    /// 224x224 inputs, 14x14 patch grid, twelve transformer blocks.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub lambda: u32,
    /// Backbone block whose output receives the fusion; profile default if unset.
    pub injection_index: Option<usize>,
    pub use_fdmt: bool,
    pub fusion: Fusion,
    pub attention_scale: AttentionScale,
    pub position_embedding: bool,
    /// Epochs of depth-only training before joint training starts.
    pub staged_epochs: usize,
    /// Use only the first `n` training records.
    pub train_limit: Option<usize>,
    /// Dataset directory for the CLI; relative paths resolve against the output root.
    pub data_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Mini,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            alpha: LossWeights::default().alpha,
            beta: LossWeights::default().beta,
            ssim_c1: SsimConstants::default().c1,
            ssim_c2: SsimConstants::default().c2,
            lambda: DEFAULT_LAMBDA,
            injection_index: None,
            use_fdmt: true,
            fusion: Fusion::Mda,
            attention_scale: AttentionScale::HeadWidth,
            position_embedding: true,
            staged_epochs: 0,
            train_limit: None,
            data_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn ssim_constants(&self) -> SsimConstants {
        SsimConstants {
            c1: self.ssim_c1,
            c2: self.ssim_c2,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.profile {
            Profile::Mini => ModelConfig::mini(),
            Profile::Full => ModelConfig::full(),
        };
        if let Some(i) = self.injection_index {
            m.backbone.injection_index = i;
        }
        m.use_fdmt = self.use_fdmt;
        m.fusion = self.fusion;
        m.mda.scale = self.attention_scale;
        m.fdmt.position_embedding = self.position_embedding;
        m
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.staged_epochs >= self.epochs {
            return Err(Error::config("staged_epochs must leave at least one joint epoch"));
        }
        if self.staged_epochs > 0 && !self.use_fdmt {
            return Err(Error::config("staged training needs the depth transformer"));
        }
        if self.lambda == 0 || self.lambda > 255 {
            return Err(Error::config("lambda must lie in 1..=255"));
        }
        self.loss_weights().validate()?;
        self.ssim_constants().validate()?;
        self.model_config().validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Parse by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
