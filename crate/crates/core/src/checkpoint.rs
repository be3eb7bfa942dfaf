//! `STPTCKPT` checkpoint files.
//!
//! Layout: the 8-byte magic `STPTCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then every array
//! as raw little-endian `f64`s at the byte offsets listed in the header.
//! Offsets count from the first byte after the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::CheckpointError;
use crate::model::{ModelConfig, ModelParameters};
use crate::prompt::{PromptSet, PromptVariant};
use crate::tensor::Tensor;
use crate::train::{Strategy, TrainedModel};

pub const MAGIC: &[u8; 8] = b"STPTCKPT";
pub const VERSION: u32 = 1;

const NORMALIZER_MIN: &str = "normalizer.min";
const NORMALIZER_MAX: &str = "normalizer.max";

/// How a checkpoint's parameters were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs_run: usize,
    pub steps: usize,
    pub final_val_loss: Option<f64>,
    /// Index into the source data's attributes, for single-attribute models.
    pub target_attribute: Option<usize>,
    pub trainable_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub prompts: Option<PromptSet>,
    /// Statistics for the attributes the model predicts, in model order.
    pub normalizer: Normalizer,
    pub attribute_names: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    prompt_variant: Option<PromptVariant>,
    attribute_names: Vec<String>,
    provenance: Provenance,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Wraps a training result. `normalizer` and `names` describe the
    /// attributes of the data the model was trained on.
    pub fn from_trained(model: &TrainedModel, normalizer: &Normalizer, names: &[String]) -> Self {
        let (normalizer, attribute_names) = match model.train.target_attribute {
            Some(a) if model.train.strategy != Strategy::Full => {
                (normalizer.select(&[a]), vec![names[a].clone()])
            }
            _ => (normalizer.clone(), names.to_vec()),
        };
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            prompts: model.prompts.clone(),
            normalizer,
            attribute_names,
            provenance: Provenance {
                strategy: model.train.strategy,
                seed: model.train.seed,
                epochs_run: model.outcome.epochs_run,
                steps: model.outcome.steps,
                final_val_loss: model.outcome.best_val_loss,
                target_attribute: match model.train.strategy {
                    Strategy::Full => None,
                    _ => model.train.target_attribute,
                },
                trainable_count: model.trainable_count,
            },
        }
    }

    fn arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.params.visit(&mut |n, t| out.push((n, t.clone())));
        if let Some(p) = &self.prompts {
            p.visit(&mut |n, t| out.push((n, t.clone())));
        }
        let c = self.normalizer.attributes();
        out.push((
            NORMALIZER_MIN.into(),
            Tensor::new(vec![c], self.normalizer.min.clone()).expect("vector"),
        ));
        out.push((
            NORMALIZER_MAX.into(),
            Tensor::new(vec![c], self.normalizer.max.clone()).expect("vector"),
        ));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let arrays = self.arrays();
        let mut offset = 0u64;
        let entries = arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            prompt_variant: self.prompts.as_ref().map(|p| p.variant),
            attribute_names: self.attribute_names.clone(),
            provenance: self.provenance.clone(),
            arrays: entries,
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take::<4>(bytes, 8)?);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(take::<8>(bytes, 12)?) as usize;
        let body_start = 20usize
            .checked_add(header_len)
            .ok_or(CheckpointError::Truncated)?;
        let json = bytes
            .get(20..body_start)
            .ok_or(CheckpointError::Truncated)?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let body = &bytes[body_start..];
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut next = 0u64;
        let mut read = |entry: &ArrayEntry| -> Result<Tensor, CheckpointError> {
            let bad = |message: String| CheckpointError::Array {
                name: entry.name.clone(),
                message,
            };
            if entry.offset != next {
                return Err(bad(format!(
                    "offset {} breaks the contiguous layout at {next}",
                    entry.offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let stop = start + 8 * numel;
            let raw = body.get(start..stop).ok_or(CheckpointError::Truncated)?;
            next = stop as u64;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))
        };
        let mut loaded = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            loaded.push((entry.name.clone(), read(entry)?));
        }
        if next as usize != body.len() {
            return Err(CheckpointError::Header(format!(
                "{} trailing bytes after the last array",
                body.len() - next as usize
            )));
        }

        let config = header.config;
        let mut arrays = loaded.into_iter();
        let mut expect = |name: &str, shape: &[usize]| -> Result<Tensor, CheckpointError> {
            let Some((found, t)) = arrays.next() else {
                return Err(CheckpointError::Array {
                    name: name.to_string(),
                    message: "missing".into(),
                });
            };
            if found != name {
                return Err(CheckpointError::Array {
                    name: name.to_string(),
                    message: format!("expected here, found {found}"),
                });
            }
            if t.shape() != shape {
                return Err(CheckpointError::Array {
                    name: found,
                    message: format!(
                        "shape {:?} does not match config, expected {shape:?}",
                        t.shape()
                    ),
                });
            }
            Ok(t)
        };
        let template = ModelParameters::init(&config, 0);
        let params = template.try_map(&mut |name, t| expect(&name, t.shape()))?;
        let prompts = match header.prompt_variant {
            Some(variant) => {
                let template = PromptSet::init(variant, &config, 0)
                    .map_err(|e| CheckpointError::Header(e.to_string()))?;
                Some(template.try_map(&mut |name, t| expect(&name, t.shape()))?)
            }
            None => None,
        };
        let c = config.attributes;
        let min = expect(NORMALIZER_MIN, &[c])?.into_data();
        let max = expect(NORMALIZER_MAX, &[c])?.into_data();
        if let Some((extra, _)) = arrays.next() {
            return Err(CheckpointError::Array {
                name: extra,
                message: "not part of this model".into(),
            });
        }
        if header.attribute_names.len() != c {
            return Err(CheckpointError::Header(format!(
                "{} attribute names for {c} attributes",
                header.attribute_names.len()
            )));
        }
        Ok(Self {
            config,
            params,
            prompts,
            normalizer: Normalizer { min, max },
            attribute_names: header.attribute_names,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn take<const N: usize>(bytes: &[u8], at: usize) -> Result<[u8; N], CheckpointError> {
    bytes
        .get(at..at + N)
        .and_then(|s| s.try_into().ok())
        .ok_or(CheckpointError::Truncated)
}
