//! The four training strategies on top of [`Trainer`].

use super::{Strategy, TrainConfig, TrainOutcome, Trainable, Trainer};
use crate::data::WindowSet;
use crate::error::{ConfigError, Error};
use crate::model::{Head, ModelConfig, ModelParameters};
use crate::prompt::PromptSet;

/// Parameters and provenance after one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    /// Architecture of the trained model; `attributes` counts the attributes
    /// it was trained on.
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub prompts: Option<PromptSet>,
    pub train: TrainConfig,
    pub trainable_count: usize,
    pub optimizer_keys: Vec<String>,
    pub outcome: TrainOutcome,
}

fn run(
    config: ModelConfig,
    params: ModelParameters,
    prompts: Option<PromptSet>,
    trainable: Trainable,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, Error> {
    let mut trainer = Trainer::new(config.clone(), params, prompts, trainable, cfg)?;
    let trainable_count = trainer.trainable_count();
    let optimizer_keys = trainer.optimizer().keys().map(String::from).collect();
    let outcome = trainer.fit(train, val)?;
    let (params, prompts) = trainer.into_parts();
    Ok(TrainedModel {
        config,
        params,
        prompts,
        train: cfg.clone(),
        trainable_count,
        optimizer_keys,
        outcome,
    })
}

fn expect_strategy(cfg: &TrainConfig, want: Strategy) -> Result<(), ConfigError> {
    cfg.validate()?;
    if cfg.strategy != want {
        return Err(ConfigError::Train(format!(
            "expected a {want} config, got {}",
            cfg.strategy
        )));
    }
    Ok(())
}

/// Narrows the data and config to the configured target attribute.
fn target(
    config: &ModelConfig,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<(ModelConfig, WindowSet, Option<WindowSet>), Error> {
    let attr = cfg
        .target_attribute
        .ok_or_else(|| ConfigError::Train(format!("{} needs a target attribute", cfg.strategy)))?;
    let train = train.select_attributes(&[attr])?;
    let val = val.map(|v| v.select_attributes(&[attr])).transpose()?;
    let config = ModelConfig {
        attributes: 1,
        ..config.clone()
    };
    Ok((config, train, val))
}

fn all_trainable() -> Trainable {
    Trainable {
        backbone: true,
        head: true,
        prompts: false,
    }
}

/// Joint training of θ and ω on every attribute.
pub fn pretrain(
    config: &ModelConfig,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, Error> {
    expect_strategy(cfg, Strategy::Full)?;
    config.validate()?;
    let params = ModelParameters::init(config, cfg.seed);
    run(
        config.clone(),
        params,
        None,
        all_trainable(),
        train,
        val,
        cfg,
    )
}

/// A fresh model trained on the target attribute alone.
pub fn single_train(
    config: &ModelConfig,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, Error> {
    expect_strategy(cfg, Strategy::Single)?;
    let (config, train, val) = target(config, train, val, cfg)?;
    let params = ModelParameters::init(&config, cfg.seed);
    run(
        config,
        params,
        None,
        all_trainable(),
        &train,
        val.as_ref(),
        cfg,
    )
}

/// Every parameter tuned on the target attribute, starting from `pretrained`
/// including its head.
pub fn fine_tune(
    config: &ModelConfig,
    pretrained: &ModelParameters,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, Error> {
    expect_strategy(cfg, Strategy::FineTune)?;
    pretrained.check_shapes(config)?;
    let (config, train, val) = target(config, train, val, cfg)?;
    run(
        config,
        pretrained.clone(),
        None,
        all_trainable(),
        &train,
        val.as_ref(),
        cfg,
    )
}

/// Frozen backbone; fresh prompt tokens and a fresh head (or the pretrained
/// head with `warm_start_head`) tuned on the target attribute.
pub fn prompt_tune(
    config: &ModelConfig,
    pretrained: &ModelParameters,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, Error> {
    expect_strategy(cfg, Strategy::PromptTune)?;
    pretrained.check_shapes(config)?;
    let variant = cfg
        .prompt_variant
        .ok_or_else(|| ConfigError::Train("PROMPT_TUNE needs a prompt variant".into()))?;
    let (config, train, val) = target(config, train, val, cfg)?;
    let head = if cfg.warm_start_head {
        pretrained.head.clone()
    } else {
        Head::init(&config, cfg.seed)
    };
    let params = ModelParameters {
        backbone: pretrained.backbone.clone(),
        head,
    };
    let prompts = PromptSet::init(variant, &config, cfg.seed)?;
    let trainable = Trainable {
        backbone: false,
        head: true,
        prompts: true,
    };
    run(
        config,
        params,
        Some(prompts),
        trainable,
        &train,
        val.as_ref(),
        cfg,
    )
}

/// Dispatches on `cfg.strategy`. Tuning strategies need `pretrained`.
pub fn train(
    config: &ModelConfig,
    pretrained: Option<&ModelParameters>,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel, Error> {
    let need = || ConfigError::Train(format!("{} needs pretrained parameters", cfg.strategy));
    match cfg.strategy {
        Strategy::Full => pretrain(config, train, val, cfg),
        Strategy::Single => single_train(config, train, val, cfg),
        Strategy::FineTune => fine_tune(config, pretrained.ok_or_else(need)?, train, val, cfg),
        Strategy::PromptTune => prompt_tune(config, pretrained.ok_or_else(need)?, train, val, cfg),
    }
}
