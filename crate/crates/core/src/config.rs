//! The run configuration: one TOML file holding every module's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationConfig;
use crate::bank::BankConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::events::EventConfig;
use crate::fusion::FusionConfig;
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, QueryTower};
use crate::synth::SynthSizes;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub query_tower: QueryTower,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub bank: BankConfig,
    pub annotation: AnnotationConfig,
    pub event: EventConfig,
    pub eval: EvalConfig,
    pub synth: SynthSizes,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            query_tower: QueryTower::Fused,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            bank: BankConfig::default(),
            annotation: AnnotationConfig::default(),
            event: EventConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthSizes::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train_config().validate()?;
        self.annotation.validate()?;
        self.event.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        if self.fusion.tower_dim != self.event.embed_dim {
            log::debug!(
                "event embeddings are {}-wide, towers {}-wide",
                self.event.embed_dim,
                self.fusion.tower_dim
            );
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            query_tower: self.query_tower,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            bank: self.bank,
            ..self.train.clone()
        }
    }
}
