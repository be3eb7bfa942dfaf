//! User-facing run settings, independent of any one dataset's shape.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::prompt::{PromptKind, PromptVariant};
use crate::train::{
    Strategy, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE,
    PRETRAIN_LEARNING_RATE, TUNE_LEARNING_RATE,
};

/// Architecture settings; regions and attributes come from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub input_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub heads: usize,
    /// Defaults to `4 · d_model`.
    pub d_ff: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            input_len: 12,
            horizon: 12,
            d_model: 32,
            temporal_layers: 2,
            spatial_layers: 2,
            heads: 4,
            d_ff: None,
        }
    }
}

impl ModelSettings {
    pub fn build(&self, regions: usize, attributes: usize) -> ModelConfig {
        let mut config = ModelConfig::new(
            self.input_len,
            self.horizon,
            regions,
            attributes,
            self.d_model,
            self.temporal_layers,
            self.heads,
        )
        .with_layers(self.temporal_layers, self.spatial_layers);
        if let Some(d_ff) = self.d_ff {
            config = config.with_d_ff(d_ff);
        }
        config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_epochs() -> usize {
    DEFAULT_MAX_EPOCHS
}

fn default_patience() -> usize {
    DEFAULT_PATIENCE
}

impl TrainSettings {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            max_steps: None,
            patience: DEFAULT_PATIENCE,
        }
    }

    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            max_steps: self.max_steps,
            patience: self.patience,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub variant: PromptKind,
    pub n_st: usize,
    pub n_ti: usize,
    pub warm_start_head: bool,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            variant: PromptKind::StFull,
            n_st: 2,
            n_ti: 2,
            warm_start_head: false,
        }
    }
}

impl PromptSettings {
    pub fn variant(&self) -> PromptVariant {
        PromptVariant {
            kind: self.variant,
            n_st: self.n_st,
            n_ti: self.n_ti,
        }
    }

    pub fn with_kind(&self, kind: PromptKind) -> PromptVariant {
        PromptVariant {
            kind,
            ..self.variant()
        }
    }
}

/// Everything a pretrain, tune or experiment run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSettings,
    pub pretrain: TrainSettings,
    pub tune: TrainSettings,
    pub prompt: PromptSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSettings::default(),
            pretrain: TrainSettings::with_learning_rate(PRETRAIN_LEARNING_RATE),
            tune: TrainSettings::with_learning_rate(TUNE_LEARNING_RATE),
            prompt: PromptSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        self.pretrain.apply(TrainConfig::pretrain(seed))
    }

    pub fn single_config(&self, target: usize, seed: u64) -> TrainConfig {
        self.pretrain.apply(TrainConfig::single(target, seed))
    }

    pub fn fine_tune_config(&self, target: usize, seed: u64) -> TrainConfig {
        self.tune.apply(TrainConfig::fine_tune(target, seed))
    }

    pub fn prompt_tune_config(
        &self,
        variant: PromptVariant,
        target: usize,
        seed: u64,
    ) -> TrainConfig {
        TrainConfig {
            warm_start_head: self.prompt.warm_start_head,
            ..self
                .tune
                .apply(TrainConfig::prompt_tune(variant, target, seed))
        }
    }

    pub fn config_for(&self, strategy: Strategy, target: Option<usize>, seed: u64) -> TrainConfig {
        let t = target.unwrap_or(0);
        match strategy {
            Strategy::Full => self.pretrain_config(seed),
            Strategy::Single => self.single_config(t, seed),
            Strategy::FineTune => self.fine_tune_config(t, seed),
            Strategy::PromptTune => self.prompt_tune_config(self.prompt.variant(), t, seed),
        }
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("settings serialize to JSON");
    hex::encode(Sha256::digest(&json))
}
