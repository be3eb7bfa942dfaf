//! Prompt tokens for tuning a frozen backbone on a single target attribute.
//!
//! Concatenating variants prepend their tokens to an encoder layer's input
//! sequence and cut the same number of leading positions off the layer's
//! output, so the original trailing positions (and the last timestep in
//! particular) keep their meaning.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, TensorError};
use crate::model::params::uniform;
use crate::model::ModelConfig;
use crate::tensor::{Tape, Tensor, Var};

const PROMPT_SEED_SALT: u64 = 0x7072_6f6d_7074_7374;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Per-region tokens prepended on the time axis of every temporal layer.
    StFull,
    /// Region-shared tokens in every temporal and spatial layer.
    Tiny,
    /// `StFull` restricted to the first temporal layer.
    Shallow,
    /// Per-region tokens summed into every timestep instead of prepended.
    Add,
    /// No tokens; only the head is tuned.
    None,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::StFull,
        PromptKind::Tiny,
        PromptKind::Shallow,
        PromptKind::Add,
        PromptKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::StFull => "st",
            PromptKind::Tiny => "tiny",
            PromptKind::Shallow => "shallow",
            PromptKind::Add => "add",
            PromptKind::None => "none",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ConfigError::Prompt(format!("unknown prompt variant {s:?}")))
    }
}

/// Which prompt tokens to use and how many.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptVariant {
    pub kind: PromptKind,
    /// Tokens per temporal layer for `StFull`, `Shallow` and `Add`.
    pub n_st: usize,
    /// Tokens per layer for `Tiny`.
    pub n_ti: usize,
}

impl PromptVariant {
    pub fn new(kind: PromptKind, tokens: usize) -> Self {
        Self {
            kind,
            n_st: tokens,
            n_ti: tokens,
        }
    }

    pub fn none() -> Self {
        Self::new(PromptKind::None, 0)
    }

    /// Number of temporal layers that carry per-region tokens.
    fn st_layers(&self, config: &ModelConfig) -> usize {
        match self.kind {
            PromptKind::StFull | PromptKind::Add => config.temporal_layers,
            PromptKind::Shallow => config.temporal_layers.min(1),
            PromptKind::Tiny | PromptKind::None => 0,
        }
    }

    /// Prompt parameters only, excluding the head.
    pub fn prompt_param_count(&self, config: &ModelConfig) -> usize {
        let d = config.d_model;
        match self.kind {
            PromptKind::StFull | PromptKind::Shallow | PromptKind::Add => {
                self.st_layers(config) * config.regions * self.n_st * d
            }
            PromptKind::Tiny => (config.temporal_layers + config.spatial_layers) * self.n_ti * d,
            PromptKind::None => 0,
        }
    }
}

/// Parameters trained in prompt tuning: prompt tokens plus a fresh head.
pub fn trainable_params(variant: &PromptVariant, config: &ModelConfig) -> usize {
    variant.prompt_param_count(config) + config.head_param_count()
}

/// Trainable tokens for one target attribute.
///
/// Token groups for zero-sized counts are left empty, which makes a
/// zero-token set behave exactly like `PromptKind::None`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet<P = Tensor> {
    pub variant: PromptVariant,
    /// Per temporal layer, each N×n_st×D.
    pub st_tokens: Vec<P>,
    /// Per temporal layer, each n_ti×D, shared by all regions.
    pub tiny_temporal: Vec<P>,
    /// Per spatial layer, each n_ti×D.
    pub tiny_spatial: Vec<P>,
}

impl<P> PromptSet<P> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (i, p) in self.st_tokens.iter().enumerate() {
            f(format!("prompt.st.{i}"), p);
        }
        for (i, p) in self.tiny_temporal.iter().enumerate() {
            f(format!("prompt.tiny_temporal.{i}"), p);
        }
        for (i, p) in self.tiny_spatial.iter().enumerate() {
            f(format!("prompt.tiny_spatial.{i}"), p);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        for (i, p) in self.st_tokens.iter_mut().enumerate() {
            f(format!("prompt.st.{i}"), p);
        }
        for (i, p) in self.tiny_temporal.iter_mut().enumerate() {
            f(format!("prompt.tiny_temporal.{i}"), p);
        }
        for (i, p) in self.tiny_spatial.iter_mut().enumerate() {
            f(format!("prompt.tiny_spatial.{i}"), p);
        }
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &P) -> Result<U, E>,
    ) -> Result<PromptSet<U>, E> {
        let mut group = |prefix: &str, items: &[P]| -> Result<Vec<U>, E> {
            items
                .iter()
                .enumerate()
                .map(|(i, p)| f(format!("{prefix}.{i}"), p))
                .collect()
        };
        Ok(PromptSet {
            variant: self.variant,
            st_tokens: group("prompt.st", &self.st_tokens)?,
            tiny_temporal: group("prompt.tiny_temporal", &self.tiny_temporal)?,
            tiny_spatial: group("prompt.tiny_spatial", &self.tiny_spatial)?,
        })
    }
}

impl PromptSet<Tensor> {
    /// Draws tokens from a uniform Xavier distribution, ±sqrt(6 / (D + D)).
    pub fn init(
        variant: PromptVariant,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let d = config.d_model;
        let bound = (6.0 / (2 * d) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROMPT_SEED_SALT);
        let mut set = Self {
            variant,
            st_tokens: Vec::new(),
            tiny_temporal: Vec::new(),
            tiny_spatial: Vec::new(),
        };
        match variant.kind {
            PromptKind::StFull | PromptKind::Shallow | PromptKind::Add if variant.n_st > 0 => {
                set.st_tokens = (0..variant.st_layers(config))
                    .map(|_| uniform(&[config.regions, variant.n_st, d], bound, &mut rng))
                    .collect();
            }
            PromptKind::Tiny if variant.n_ti > 0 => {
                set.tiny_temporal = (0..config.temporal_layers)
                    .map(|_| uniform(&[variant.n_ti, d], bound, &mut rng))
                    .collect();
                set.tiny_spatial = (0..config.spatial_layers)
                    .map(|_| uniform(&[variant.n_ti, d], bound, &mut rng))
                    .collect();
            }
            _ => {}
        }
        Ok(set)
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Checks token shapes against a model configuration.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ConfigError> {
        let expected = Self::init(self.variant, config, 0)?;
        let mut want = Vec::new();
        expected.visit(&mut |n, t| want.push((n, t.shape().to_vec())));
        let mut have = Vec::new();
        self.visit(&mut |n, t| have.push((n, t.shape().to_vec())));
        if want != have {
            return Err(ConfigError::Mismatch(format!(
                "prompt tokens {have:?} do not fit the model, expected {want:?}"
            )));
        }
        Ok(())
    }
}

/// Leading positions to drop from a layer output along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Truncation {
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl Truncation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.slice_axis(x, self.axis, self.start, self.start + self.len)
    }
}

/// Drops injected positions, or passes `x` through unchanged.
pub fn truncate(
    tape: &mut Tape,
    x: Var,
    truncation: Option<Truncation>,
) -> Result<Var, TensorError> {
    match truncation {
        Some(t) => t.apply(tape, x),
        None => Ok(x),
    }
}

fn prepend(tape: &mut Tape, z: Var, token: Var) -> Result<(Var, Option<Truncation>), TensorError> {
    let shape = tape.shape(z).to_vec();
    let rank = shape.len();
    let axis = rank - 2;
    let n = tape.shape(token)[tape.shape(token).len() - 2];
    let mut target = shape.clone();
    target[axis] = n;
    let expanded = tape.broadcast_to(token, &target)?;
    let augmented = tape.concat_axis(&[expanded, z], axis)?;
    Ok((
        augmented,
        Some(Truncation {
            axis,
            start: n,
            len: shape[axis],
        }),
    ))
}

/// Prompt injection for temporal layer `layer` (0-based).
///
/// `z` has shape `[.., N, T', D]`. Returns the sequence to feed the layer and
/// the truncation that restores the original length afterwards.
pub fn inject_temporal(
    tape: &mut Tape,
    z: Var,
    layer: usize,
    prompts: Option<&PromptSet<Var>>,
) -> Result<(Var, Option<Truncation>), TensorError> {
    let Some(prompts) = prompts else {
        return Ok((z, None));
    };
    if tape.shape(z).len() < 3 {
        return Err(TensorError::Dimension {
            op: "inject_temporal",
            message: format!("expected [.., N, T, D], got {:?}", tape.shape(z)),
        });
    }
    match prompts.variant.kind {
        PromptKind::StFull | PromptKind::Shallow => match prompts.st_tokens.get(layer) {
            Some(&token) => prepend(tape, z, token),
            None => Ok((z, None)),
        },
        PromptKind::Tiny => match prompts.tiny_temporal.get(layer) {
            Some(&token) => prepend(tape, z, token),
            None => Ok((z, None)),
        },
        PromptKind::Add => match prompts.st_tokens.get(layer) {
            Some(&token) => {
                let [regions, _, d] = tape.shape(token)[..] else {
                    unreachable!("st tokens are N×n×D")
                };
                let summed = tape.sum_axis(token, 1)?;
                let per_region = tape.reshape(summed, &[regions, 1, d])?;
                Ok((tape.add(z, per_region)?, None))
            }
            None => Ok((z, None)),
        },
        PromptKind::None => Ok((z, None)),
    }
}

/// Prompt injection for spatial layer `layer` (0-based); only `Tiny` acts here.
///
/// `z` has shape `[.., N, D]`.
pub fn inject_spatial(
    tape: &mut Tape,
    z: Var,
    layer: usize,
    prompts: Option<&PromptSet<Var>>,
) -> Result<(Var, Option<Truncation>), TensorError> {
    match prompts {
        Some(p) if p.variant.kind == PromptKind::Tiny => match p.tiny_spatial.get(layer) {
            Some(&token) => prepend(tape, z, token),
            None => Ok((z, None)),
        },
        _ => Ok((z, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> ModelConfig {
        ModelConfig::reference(19)
    }

    #[test]
    fn reference_counts() {
        let cfg = reference();
        let count = |kind| trainable_params(&PromptVariant::new(kind, 2), &cfg);
        assert_eq!(count(PromptKind::StFull), 8588);
        assert_eq!(count(PromptKind::Tiny), 652);
        assert_eq!(count(PromptKind::Shallow), 4492);
        assert_eq!(count(PromptKind::Add), 8588);
        assert_eq!(count(PromptKind::None), 396);
        assert_eq!(
            PromptVariant::new(PromptKind::StFull, 2).prompt_param_count(&cfg),
            8192
        );
        assert_eq!(
            PromptVariant::new(PromptKind::Tiny, 2).prompt_param_count(&cfg),
            256
        );
    }

    #[test]
    fn init_matches_closed_forms() {
        let cfg = reference();
        for kind in PromptKind::ALL {
            let v = PromptVariant::new(kind, 2);
            let set = PromptSet::init(v, &cfg, 3).unwrap();
            assert_eq!(set.numel(), v.prompt_param_count(&cfg), "{kind}");
        }
        let none = PromptSet::init(PromptVariant::none(), &cfg, 3).unwrap();
        assert_eq!(none.numel(), 0);
    }

    #[test]
    fn tokens_within_xavier_bound_and_deterministic() {
        let cfg = reference();
        let v = PromptVariant::new(PromptKind::StFull, 2);
        let a = PromptSet::init(v, &cfg, 11).unwrap();
        assert_eq!(a, PromptSet::init(v, &cfg, 11).unwrap());
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(a
            .st_tokens
            .iter()
            .all(|t| t.data().iter().all(|x| x.abs() <= bound)));
    }

    #[test]
    fn parses_variant_names() {
        assert_eq!("st".parse::<PromptKind>().unwrap(), PromptKind::StFull);
        assert_eq!("tiny".parse::<PromptKind>().unwrap(), PromptKind::Tiny);
        assert!("deep".parse::<PromptKind>().is_err());
    }

    fn bind(tape: &mut Tape, set: &PromptSet) -> PromptSet<Var> {
        set.try_map::<_, ()>(&mut |_, t| Ok(tape.param(t.clone())))
            .unwrap()
    }

    #[test]
    fn st_full_extends_time_axis() {
        let cfg = reference();
        let set = PromptSet::init(PromptVariant::new(PromptKind::StFull, 2), &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &set);
        let z = tape.constant(Tensor::zeros(&[3, 64, 12, 32]));
        let (aug, trunc) = inject_temporal(&mut tape, z, 1, Some(&bound)).unwrap();
        assert_eq!(tape.shape(aug), &[3, 64, 14, 32]);
        let back = truncate(&mut tape, aug, trunc).unwrap();
        assert_eq!(tape.value(back), tape.value(z));
        // prompt tokens come first
        assert_eq!(
            tape.value(aug).at(&[0, 5, 1, 7]),
            set.st_tokens[1].at(&[5, 1, 7])
        );
    }

    #[test]
    fn tiny_expands_one_token_over_regions() {
        let cfg = reference();
        let set = PromptSet::init(PromptVariant::new(PromptKind::Tiny, 2), &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &set);
        let z = tape.constant(Tensor::zeros(&[64, 12, 32]));
        let (aug, _) = inject_temporal(&mut tape, z, 0, Some(&bound)).unwrap();
        assert_eq!(tape.shape(aug), &[64, 14, 32]);
        let v = tape.value(aug);
        assert_eq!(v.at(&[0, 1, 3]), v.at(&[63, 1, 3]));

        let zs = tape.constant(Tensor::zeros(&[64, 32]));
        let (aug, trunc) = inject_spatial(&mut tape, zs, 1, Some(&bound)).unwrap();
        assert_eq!(tape.shape(aug), &[66, 32]);
        let back = truncate(&mut tape, aug, trunc).unwrap();
        assert_eq!(tape.shape(back), &[64, 32]);
    }

    #[test]
    fn shallow_only_touches_first_layer() {
        let cfg = reference();
        let set = PromptSet::init(PromptVariant::new(PromptKind::Shallow, 2), &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &set);
        let z = tape.constant(Tensor::zeros(&[64, 12, 32]));
        let (first, _) = inject_temporal(&mut tape, z, 0, Some(&bound)).unwrap();
        assert_eq!(tape.shape(first), &[64, 14, 32]);
        let (second, trunc) = inject_temporal(&mut tape, z, 1, Some(&bound)).unwrap();
        assert_eq!(second, z);
        assert!(trunc.is_none());
    }

    #[test]
    fn none_and_non_tiny_spatial_pass_through() {
        let cfg = reference();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[64, 12, 32]));
        let none = bind(
            &mut tape,
            &PromptSet::init(PromptVariant::none(), &cfg, 0).unwrap(),
        );
        assert_eq!(
            inject_temporal(&mut tape, z, 0, Some(&none)).unwrap(),
            (z, None)
        );
        let st = bind(
            &mut tape,
            &PromptSet::init(PromptVariant::new(PromptKind::StFull, 2), &cfg, 0).unwrap(),
        );
        let zs = tape.constant(Tensor::zeros(&[64, 32]));
        assert_eq!(
            inject_spatial(&mut tape, zs, 0, Some(&st)).unwrap(),
            (zs, None)
        );
    }

    #[test]
    fn add_with_zero_tokens_is_identity() {
        let cfg = reference();
        let mut set = PromptSet::init(PromptVariant::new(PromptKind::Add, 2), &cfg, 0).unwrap();
        set.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &set);
        let z = tape.constant(Tensor::full(&[64, 12, 32], 0.25));
        let (out, trunc) = inject_temporal(&mut tape, z, 0, Some(&bound)).unwrap();
        assert!(trunc.is_none());
        assert_eq!(tape.value(out), tape.value(z));
    }

    #[test]
    fn check_shapes_rejects_other_region_count() {
        let cfg = reference();
        let set = PromptSet::init(PromptVariant::new(PromptKind::StFull, 2), &cfg, 0).unwrap();
        let mut other = cfg.clone();
        other.regions = 16;
        assert!(set.check_shapes(&cfg).is_ok());
        assert!(set.check_shapes(&other).is_err());
    }
}
