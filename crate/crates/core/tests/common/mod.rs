#![allow(dead_code)]

pub mod fd;
pub mod oracle;

use promptst::config::RunConfig;
use promptst::data::{synthesize, SynthSpec};
use promptst::experiments::Prepared;
use promptst::model::ModelConfig;
use promptst::train::TrainConfig;

/// Small synthetic split on a 2x3 grid: T=4, H=3.
pub fn tiny(attributes: usize, timesteps: usize, seed: u64) -> Prepared {
    let series = synthesize(&SynthSpec::new(2, 3, attributes, timesteps, seed)).unwrap();
    Prepared::new(&series, 4, 3).unwrap()
}

pub fn tiny_config(data: &Prepared) -> ModelConfig {
    ModelConfig::new(4, 3, data.regions(), data.attributes(), 8, 1, 2)
}

pub fn budget(cfg: TrainConfig, steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        max_epochs: steps,
        patience: steps.max(1),
        batch_size: batch,
        ..cfg
    }
}

pub fn run_config() -> RunConfig {
    RunConfig::default()
}
