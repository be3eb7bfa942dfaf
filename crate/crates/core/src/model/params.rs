//! Parameter trees for the backbone (θ) and head (ω).
//!
//! Every group is generic over its leaf type so the same structure holds
//! plain [`Tensor`]s, tape [`Var`](crate::tensor::Var)s bound for one forward
//! pass, or per-parameter optimizer moments. Leaf names are stable and are
//! used as checkpoint array names and optimizer state keys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::ConfigError;
use crate::tensor::Tensor;

const HEAD_SEED_SALT: u64 = 0x6865_6164_5f69_6e69;

/// Weights of one encoder layer `F(M(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub attn_norm_gain: P,
    pub attn_norm_bias: P,
    pub ff_w1: P,
    pub ff_b1: P,
    pub ff_w2: P,
    pub ff_b2: P,
    pub ff_norm_gain: P,
    pub ff_norm_bias: P,
}

impl<P> EncoderLayer<P> {
    const NAMES: [&'static str; 12] = [
        "wq",
        "wk",
        "wv",
        "wo",
        "attn_norm.gain",
        "attn_norm.bias",
        "ff.w1",
        "ff.b1",
        "ff.w2",
        "ff.b2",
        "ff_norm.gain",
        "ff_norm.bias",
    ];

    fn fields(&self) -> [&P; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut P; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
        ]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (name, p) in Self::NAMES.iter().zip(self.fields()) {
            f(format!("{prefix}.{name}"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (name, p) in Self::NAMES.iter().zip(self.fields_mut()) {
            f(format!("{prefix}.{name}"), p);
        }
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &P) -> Result<U, E>,
    ) -> Result<EncoderLayer<U>, E> {
        let mut g = |name: &str, p: &P| f(format!("{prefix}.{name}"), p);
        Ok(EncoderLayer {
            wq: g("wq", &self.wq)?,
            wk: g("wk", &self.wk)?,
            wv: g("wv", &self.wv)?,
            wo: g("wo", &self.wo)?,
            attn_norm_gain: g("attn_norm.gain", &self.attn_norm_gain)?,
            attn_norm_bias: g("attn_norm.bias", &self.attn_norm_bias)?,
            ff_w1: g("ff.w1", &self.ff_w1)?,
            ff_b1: g("ff.b1", &self.ff_b1)?,
            ff_w2: g("ff.w2", &self.ff_w2)?,
            ff_b2: g("ff.b2", &self.ff_b2)?,
            ff_norm_gain: g("ff_norm.gain", &self.ff_norm_gain)?,
            ff_norm_bias: g("ff_norm.bias", &self.ff_norm_bias)?,
        })
    }
}

impl EncoderLayer<Tensor> {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        Self {
            wq: uniform_fan_in(&[d, d], d, rng),
            wk: uniform_fan_in(&[d, d], d, rng),
            wv: uniform_fan_in(&[d, d], d, rng),
            wo: uniform_fan_in(&[d, d], d, rng),
            attn_norm_gain: Tensor::ones(&[d]),
            attn_norm_bias: Tensor::zeros(&[d]),
            ff_w1: uniform_fan_in(&[d, ff], d, rng),
            ff_b1: Tensor::zeros(&[ff]),
            ff_w2: uniform_fan_in(&[ff, d], ff, rng),
            ff_b2: Tensor::zeros(&[d]),
            ff_norm_gain: Tensor::ones(&[d]),
            ff_norm_bias: Tensor::zeros(&[d]),
        }
    }
}

/// θ: everything except the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<P> {
    /// W_m, shape 1×D.
    pub input_weight: P,
    /// b_m, shape D.
    pub input_bias: P,
    /// p_temp, shape T×D.
    pub temporal_pos: P,
    /// p_spa, shape N×D.
    pub spatial_pos: P,
    pub temporal: Vec<EncoderLayer<P>>,
    pub spatial: Vec<EncoderLayer<P>>,
}

impl<P> Backbone<P> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        f("backbone.input.weight".into(), &self.input_weight);
        f("backbone.input.bias".into(), &self.input_bias);
        f("backbone.temporal_pos".into(), &self.temporal_pos);
        f("backbone.spatial_pos".into(), &self.spatial_pos);
        for (i, layer) in self.temporal.iter().enumerate() {
            layer.visit(&format!("backbone.temporal.{i}"), f);
        }
        for (i, layer) in self.spatial.iter().enumerate() {
            layer.visit(&format!("backbone.spatial.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        f("backbone.input.weight".into(), &mut self.input_weight);
        f("backbone.input.bias".into(), &mut self.input_bias);
        f("backbone.temporal_pos".into(), &mut self.temporal_pos);
        f("backbone.spatial_pos".into(), &mut self.spatial_pos);
        for (i, layer) in self.temporal.iter_mut().enumerate() {
            layer.visit_mut(&format!("backbone.temporal.{i}"), f);
        }
        for (i, layer) in self.spatial.iter_mut().enumerate() {
            layer.visit_mut(&format!("backbone.spatial.{i}"), f);
        }
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &P) -> Result<U, E>,
    ) -> Result<Backbone<U>, E> {
        Ok(Backbone {
            input_weight: f("backbone.input.weight".into(), &self.input_weight)?,
            input_bias: f("backbone.input.bias".into(), &self.input_bias)?,
            temporal_pos: f("backbone.temporal_pos".into(), &self.temporal_pos)?,
            spatial_pos: f("backbone.spatial_pos".into(), &self.spatial_pos)?,
            temporal: self
                .temporal
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("backbone.temporal.{i}"), f))
                .collect::<Result<_, _>>()?,
            spatial: self
                .spatial
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("backbone.spatial.{i}"), f))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(String, &P) -> U) -> Backbone<U> {
        self.try_map::<U, std::convert::Infallible>(&mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

impl Backbone<Tensor> {
    /// Weights uniform in ±1/sqrt(fan_in), biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let input_weight = uniform_fan_in(&[1, d], 1, &mut rng);
        let temporal_pos = uniform_fan_in(&[config.input_len, d], d, &mut rng);
        let spatial_pos = uniform_fan_in(&[config.regions, d], d, &mut rng);
        let temporal = (0..config.temporal_layers)
            .map(|_| EncoderLayer::init(config, &mut rng))
            .collect();
        let spatial = (0..config.spatial_layers)
            .map(|_| EncoderLayer::init(config, &mut rng))
            .collect();
        Self {
            input_weight,
            input_bias: Tensor::zeros(&[d]),
            temporal_pos,
            spatial_pos,
            temporal,
            spatial,
        }
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// ω: the D→H sigmoid projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<P> {
    /// W_h, shape D×H.
    pub weight: P,
    /// b_h, shape H.
    pub bias: P,
}

impl<P> Head<P> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        f("head.weight".into(), &self.weight);
        f("head.bias".into(), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        f("head.weight".into(), &mut self.weight);
        f("head.bias".into(), &mut self.bias);
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &P) -> Result<U, E>,
    ) -> Result<Head<U>, E> {
        Ok(Head {
            weight: f("head.weight".into(), &self.weight)?,
            bias: f("head.bias".into(), &self.bias)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(String, &P) -> U) -> Head<U> {
        self.try_map::<U, std::convert::Infallible>(&mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

impl Head<Tensor> {
    /// Fresh head, drawn from a stream independent of the backbone's.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SEED_SALT);
        let d = config.d_model;
        Self {
            weight: uniform_fan_in(&[d, config.horizon], d, &mut rng),
            bias: Tensor::zeros(&[config.horizon]),
        }
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// θ and ω together.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<P = Tensor> {
    pub backbone: Backbone<P>,
    pub head: Head<P>,
}

impl<P> ModelParameters<P> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.backbone.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }

    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(String, &P) -> Result<U, E>,
    ) -> Result<ModelParameters<U>, E> {
        Ok(ModelParameters {
            backbone: self.backbone.try_map(f)?,
            head: self.head.try_map(f)?,
        })
    }
}

impl ModelParameters<Tensor> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Self {
            backbone: Backbone::init(config, seed),
            head: Head::init(config, seed),
        }
    }

    pub fn numel(&self) -> usize {
        self.backbone.numel() + self.head.numel()
    }

    /// Checks every array against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ConfigError> {
        config.validate()?;
        let expected = ModelParameters::init(config, 0);
        let want = expected.named();
        let have = self.named();
        for ((name, t), (want_name, w)) in have.iter().zip(&want) {
            if name != want_name {
                return Err(ConfigError::Mismatch(format!(
                    "expected array {want_name}, found {name}"
                )));
            }
            if t.shape() != w.shape() {
                return Err(ConfigError::Mismatch(format!(
                    "array {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        if have.len() != want.len() {
            return Err(ConfigError::Mismatch(format!(
                "{} parameter arrays, config implies {}",
                have.len(),
                want.len()
            )));
        }
        Ok(())
    }

    /// Names and values in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }
}

/// Tensor with entries uniform in ±1/sqrt(fan_in).
pub(crate) fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
