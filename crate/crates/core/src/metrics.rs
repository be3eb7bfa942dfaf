//! RMSE and MAE per attribute, on normalized and original scales.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Normalizer, WindowSet};
use crate::error::{ConfigError, Error, TrainError};
use crate::model::{predict_sequences, ModelConfig, ModelParameters};
use crate::prompt::PromptSet;
use crate::train::ErrorSums;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub name: String,
    pub rmse: f64,
    pub mae: f64,
    pub rmse_normalized: f64,
    pub mae_normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub attributes: Vec<AttributeMetrics>,
    /// Arithmetic means of the per-attribute rows.
    pub average: AttributeMetrics,
    pub windows: usize,
    pub trainable_count: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Per-attribute metrics of a model over every window, horizon step and region.
pub fn attribute_metrics(
    config: &ModelConfig,
    params: &ModelParameters,
    prompts: Option<&PromptSet>,
    normalizer: &Normalizer,
    names: &[String],
    data: &WindowSet,
) -> Result<Vec<AttributeMetrics>, Error> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let c = config.attributes;
    let dims = (data.input_len, data.horizon, data.regions, data.attributes);
    if dims != (config.input_len, config.horizon, config.regions, c) {
        return Err(ConfigError::Mismatch(format!(
            "windows (T, H, N, C) = {dims:?} do not match the model ({}, {}, {}, {c})",
            config.input_len, config.horizon, config.regions
        ))
        .into());
    }
    if normalizer.attributes() != c || names.len() != c {
        return Err(ConfigError::Mismatch(format!(
            "{} normalizer entries and {} names for {c} attributes",
            normalizer.attributes(),
            names.len()
        ))
        .into());
    }
    let mut acc = MetricAccumulator::new(normalizer.clone(), data.regions * data.horizon);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let pred = predict_sequences(config, params, prompts, &x)?;
        acc.add_batch(pred.data(), y.data());
    }
    Ok(acc.finish(names))
}

/// Error sums per attribute over batches laid out as `[B·C, N, H]`.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    normalizer: Normalizer,
    per_seq: usize,
    normalized: Vec<ErrorSums>,
    original: Vec<ErrorSums>,
}

impl MetricAccumulator {
    /// `per_seq` is the number of values per sequence, `N·H`.
    pub fn new(normalizer: Normalizer, per_seq: usize) -> Self {
        let c = normalizer.attributes();
        Self {
            normalizer,
            per_seq,
            normalized: vec![ErrorSums::default(); c],
            original: vec![ErrorSums::default(); c],
        }
    }

    pub fn add_batch(&mut self, pred: &[f64], target: &[f64]) {
        let c = self.normalizer.attributes();
        let chunks = pred
            .chunks_exact(self.per_seq)
            .zip(target.chunks_exact(self.per_seq));
        for (seq, (p, t)) in chunks.enumerate() {
            let a = seq % c;
            for (&pv, &tv) in p.iter().zip(t) {
                let d = pv - tv;
                let n = &mut self.normalized[a];
                n.squared += d * d;
                n.absolute += d.abs();
                n.count += 1;
                let d = self.normalizer.invert_value(a, pv) - self.normalizer.invert_value(a, tv);
                let o = &mut self.original[a];
                o.squared += d * d;
                o.absolute += d.abs();
                o.count += 1;
            }
        }
    }

    pub fn finish(&self, names: &[String]) -> Vec<AttributeMetrics> {
        names
            .iter()
            .zip(self.normalized.iter().zip(&self.original))
            .map(|(name, (n, o))| AttributeMetrics {
                name: name.clone(),
                rmse: o.rmse(),
                mae: o.mae(),
                rmse_normalized: n.rmse(),
                mae_normalized: n.mae(),
            })
            .collect()
    }
}

pub fn average(rows: &[AttributeMetrics]) -> AttributeMetrics {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&AttributeMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    AttributeMetrics {
        name: "average".into(),
        rmse: mean(|r| r.rmse),
        mae: mean(|r| r.mae),
        rmse_normalized: mean(|r| r.rmse_normalized),
        mae_normalized: mean(|r| r.mae_normalized),
    }
}

/// Evaluates a checkpoint on windows normalized with its own statistics,
/// already restricted to the checkpoint's attributes.
pub fn evaluate(checkpoint: &Checkpoint, data: &WindowSet) -> Result<MetricsReport, Error> {
    let attributes = attribute_metrics(
        &checkpoint.config,
        &checkpoint.params,
        checkpoint.prompts.as_ref(),
        &checkpoint.normalizer,
        &checkpoint.attribute_names,
        data,
    )?;
    Ok(MetricsReport {
        average: average(&attributes),
        attributes,
        windows: data.len(),
        trainable_count: checkpoint.provenance.trainable_count,
        epochs: checkpoint.provenance.epochs_run,
        seed: checkpoint.provenance.seed,
    })
}
