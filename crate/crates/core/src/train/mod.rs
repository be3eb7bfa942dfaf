//! Loss, Adam and the training loop shared by all four strategies.
//!
//! A [`Trainer`] owns one set of model parameters (plus optional prompt
//! tokens) and updates only the trainable subset. Strategies differ in
//! which parameters they start from and which subset they train; see
//! [`pretrain`], [`single_train`], [`fine_tune`] and [`prompt_tune`].

mod adam;
mod loss;
mod strategy;

pub use adam::{Adam, Moments, BETA1, BETA2, EPSILON};
pub use loss::{loss_value, rmse_mae, ErrorSums};
pub use strategy::{fine_tune, pretrain, prompt_tune, single_train, train, TrainedModel};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{ConfigError, Error, TrainError};
use crate::model::{
    bind_backbone, bind_head, bind_prompts, forward_sequences, predict_sequences, ModelConfig,
    ModelParameters,
};
use crate::prompt::{PromptSet, PromptVariant};
use crate::tensor::{Tape, Tensor, Var};

const SHUFFLE_SEED_SALT: u64 = 0x7368_7566_666c_6521;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// One attribute from scratch.
    Single,
    /// All attributes jointly through shared parameters.
    Full,
    /// Every parameter tuned on one attribute, starting from `Full`.
    FineTune,
    /// Frozen backbone; prompt tokens and a head tuned on one attribute.
    PromptTune,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Single => "SINGLE",
            Strategy::Full => "FULL",
            Strategy::FineTune => "FINE_TUNE",
            Strategy::PromptTune => "PROMPT_TUNE",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Strategy::Single,
            Strategy::Full,
            Strategy::FineTune,
            Strategy::PromptTune,
        ]
        .into_iter()
        .find(|k| k.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| ConfigError::Train(format!("unknown strategy {s:?}")))
    }
}

pub const PRETRAIN_LEARNING_RATE: f64 = 0.003;
pub const TUNE_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_MAX_EPOCHS: usize = 200;
pub const DEFAULT_PATIENCE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub prompt_variant: Option<PromptVariant>,
    #[serde(default)]
    pub target_attribute: Option<usize>,
    /// Start the prompt-tuning head from the pretrained one.
    #[serde(default)]
    pub warm_start_head: bool,
}

impl TrainConfig {
    fn base(strategy: Strategy, learning_rate: f64, seed: u64) -> Self {
        Self {
            strategy,
            learning_rate,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            max_steps: None,
            patience: DEFAULT_PATIENCE,
            seed,
            prompt_variant: None,
            target_attribute: None,
            warm_start_head: false,
        }
    }

    pub fn pretrain(seed: u64) -> Self {
        Self::base(Strategy::Full, PRETRAIN_LEARNING_RATE, seed)
    }

    pub fn single(target: usize, seed: u64) -> Self {
        Self {
            target_attribute: Some(target),
            ..Self::base(Strategy::Single, PRETRAIN_LEARNING_RATE, seed)
        }
    }

    pub fn fine_tune(target: usize, seed: u64) -> Self {
        Self {
            target_attribute: Some(target),
            ..Self::base(Strategy::FineTune, TUNE_LEARNING_RATE, seed)
        }
    }

    pub fn prompt_tune(variant: PromptVariant, target: usize, seed: u64) -> Self {
        Self {
            target_attribute: Some(target),
            prompt_variant: Some(variant),
            ..Self::base(Strategy::PromptTune, TUNE_LEARNING_RATE, seed)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Train(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Train("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(ConfigError::Train("patience must be at least 1".into()));
        }
        let needs_target = self.strategy != Strategy::Full;
        if needs_target && self.target_attribute.is_none() {
            return Err(ConfigError::Train(format!(
                "{} needs a target attribute",
                self.strategy
            )));
        }
        if self.strategy == Strategy::PromptTune && self.prompt_variant.is_none() {
            return Err(ConfigError::Train(
                "PROMPT_TUNE needs a prompt variant".into(),
            ));
        }
        Ok(())
    }
}

/// One row of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Loss over the whole validation split, when one was given.
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub steps: usize,
    /// Epoch whose parameters were kept, if any epoch completed.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub head: bool,
    pub prompts: bool,
}

/// Mini-batch Adam over one set of parameters.
pub struct Trainer {
    config: ModelConfig,
    params: ModelParameters,
    prompts: Option<PromptSet>,
    trainable: Trainable,
    optimizer: Adam,
    batch_size: usize,
    max_epochs: usize,
    max_steps: Option<usize>,
    patience: usize,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(
        config: ModelConfig,
        params: ModelParameters,
        prompts: Option<PromptSet>,
        trainable: Trainable,
        train: &TrainConfig,
    ) -> Result<Self, Error> {
        config.validate()?;
        train.validate()?;
        if let Some(p) = &prompts {
            p.check_shapes(&config)?;
        }
        let mut sizes = Vec::new();
        if trainable.backbone {
            params
                .backbone
                .visit(&mut |n, t| sizes.push((n, t.numel())));
        }
        if trainable.head {
            params.head.visit(&mut |n, t| sizes.push((n, t.numel())));
        }
        if let (true, Some(p)) = (trainable.prompts, &prompts) {
            p.visit(&mut |n, t| sizes.push((n, t.numel())));
        }
        Ok(Self {
            config,
            params,
            prompts,
            trainable,
            optimizer: Adam::new(train.learning_rate, sizes),
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            max_steps: train.max_steps,
            patience: train.patience,
            rng: ChaCha8Rng::seed_from_u64(train.seed ^ SHUFFLE_SEED_SALT),
            steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn prompts(&self) -> Option<&PromptSet> {
        self.prompts.as_ref()
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of scalars the optimizer updates.
    pub fn trainable_count(&self) -> usize {
        self.optimizer
            .keys()
            .map(|k| self.optimizer.moments(k).map_or(0, |m| m.m.len()))
            .sum()
    }

    pub fn into_parts(self) -> (ModelParameters, Option<PromptSet>) {
        (self.params, self.prompts)
    }

    fn check_data(&self, data: &WindowSet, training: bool) -> Result<(), Error> {
        let c = &self.config;
        if (data.input_len, data.horizon, data.regions) != (c.input_len, c.horizon, c.regions) {
            return Err(ConfigError::Mismatch(format!(
                "windows are T={} H={} N={}, model expects T={} H={} N={}",
                data.input_len, data.horizon, data.regions, c.input_len, c.horizon, c.regions
            ))
            .into());
        }
        if data.attributes != c.attributes {
            return Err(ConfigError::Mismatch(format!(
                "windows carry {} attributes, model expects {}",
                data.attributes, c.attributes
            ))
            .into());
        }
        if training {
            data.check_normalized()?;
        }
        Ok(())
    }

    /// Predictions for a batch of sequences `[S, T, N] → [S, N, H]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, Error> {
        Ok(predict_sequences(
            &self.config,
            &self.params,
            self.prompts.as_ref(),
            x,
        )?)
    }

    /// One Adam step on a batch; returns the batch loss before the update.
    pub fn step(&mut self, x: &Tensor, y: &Tensor) -> Result<f64, Error> {
        let Trainable {
            backbone: train_backbone,
            head: train_head,
            prompts: train_prompts,
        } = self.trainable;
        let mut tape = Tape::new();
        let backbone = bind_backbone(&mut tape, &self.params.backbone, train_backbone);
        let head = bind_head(&mut tape, &self.params.head, train_head);
        let prompts = self
            .prompts
            .as_ref()
            .map(|p| bind_prompts(&mut tape, p, train_prompts));
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred = forward_sequences(
            &mut tape,
            xv,
            &backbone,
            &head,
            prompts.as_ref(),
            self.config.heads,
        )?;
        let loss = rmse_mae(&mut tape, pred, yv)?;
        let loss_value = tape.value(loss).data()[0];
        tape.backward(loss)?;

        let mut grads = BTreeMap::new();
        let mut collect = |name: String, v: &Var| {
            let g = tape
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            grads.insert(name, g);
        };
        if train_backbone {
            backbone.visit(&mut collect);
        }
        if train_head {
            head.visit(&mut collect);
        }
        if let (true, Some(p)) = (train_prompts, &prompts) {
            p.visit(&mut collect);
        }

        let params = &mut self.params;
        let tokens = &mut self.prompts;
        self.optimizer.step(&grads, |f| {
            let mut each = |name: String, t: &mut Tensor| f(&name, t);
            if train_backbone {
                params.backbone.visit_mut(&mut each);
            }
            if train_head {
                params.head.visit_mut(&mut each);
            }
            if let (true, Some(p)) = (train_prompts, tokens.as_mut()) {
                p.visit_mut(&mut each);
            }
        })?;
        self.steps += 1;
        Ok(loss_value)
    }

    /// Loss over a whole window set, batched without gradients.
    pub fn evaluate_loss(&self, data: &WindowSet) -> Result<f64, Error> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset.into());
        }
        let mut sums = ErrorSums::default();
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(self.batch_size.max(1)) {
            let (x, y) = data.batch(chunk);
            sums.add(&self.predict(&x)?, &y)?;
        }
        Ok(sums.loss())
    }

    fn budget_left(&self) -> bool {
        self.max_steps.is_none_or(|m| self.steps < m)
    }

    /// Runs epochs until `max_epochs`, the step budget, or patience runs out,
    /// then restores the parameters of the best validation epoch.
    pub fn fit(
        &mut self,
        train: &WindowSet,
        val: Option<&WindowSet>,
    ) -> Result<TrainOutcome, Error> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset.into());
        }
        self.check_data(train, true)?;
        if let Some(v) = val {
            if v.is_empty() {
                return Err(TrainError::EmptyDataset.into());
            }
            self.check_data(v, false)?;
        }
        let started = Instant::now();
        let mut outcome = TrainOutcome::default();
        let mut best: Option<(f64, ModelParameters, Option<PromptSet>)> = None;
        let mut stale = 0;
        let mut order: Vec<usize> = (0..train.len()).collect();

        for epoch in 0..self.max_epochs {
            if !self.budget_left() {
                break;
            }
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.batch_size) {
                if !self.budget_left() {
                    break;
                }
                let (x, y) = train.batch(chunk);
                total += self.step(&x, &y)?;
                batches += 1;
            }
            let val_loss = val.map(|v| self.evaluate_loss(v)).transpose()?;
            outcome.history.push(EpochRecord {
                epoch,
                train_loss: total / batches.max(1) as f64,
                val_loss,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            outcome.epochs_run = epoch + 1;

            let Some(score) = val_loss else { continue };
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, self.params.clone(), self.prompts.clone()));
                outcome.best_epoch = Some(epoch);
                outcome.best_val_loss = Some(score);
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.patience {
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
        if let Some((_, params, prompts)) = best {
            self.params = params;
            self.prompts = prompts;
        } else if outcome.epochs_run > 0 {
            outcome.best_epoch = Some(outcome.epochs_run - 1);
        }
        outcome.steps = self.steps;
        Ok(outcome)
    }
}
