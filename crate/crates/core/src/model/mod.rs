//! The spatio-temporal transformer backbone and head.
//!
//! Shapes for one attribute window:
//! `T×N → N×T×D` (input map), `→ N×D` (last timestep of the temporal
//! encoder), `→ N×D` (spatial encoder), `→ N×H` (head). Every function also
//! accepts any number of leading batch axes.

mod config;
pub mod params;

pub use config::ModelConfig;
pub use params::{Backbone, EncoderLayer, Head, ModelParameters};

use crate::error::{ConfigError, Error, TensorError};
use crate::prompt::{self, PromptSet};
use crate::tensor::{Tape, Tensor, Var};

/// Sequence lengths seen by one prompted encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub input_len: usize,
    pub augmented_len: usize,
    pub output_len: usize,
}

/// Per-layer sequence lengths of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncoderTrace {
    pub temporal: Vec<LayerTrace>,
    pub spatial: Vec<LayerTrace>,
}

/// Records `params` on the tape, as trainable leaves when `trainable`.
pub fn bind_backbone(tape: &mut Tape, params: &Backbone<Tensor>, trainable: bool) -> Backbone<Var> {
    params.map(|_, t| tape.leaf(t.clone(), trainable))
}

pub fn bind_head(tape: &mut Tape, params: &Head<Tensor>, trainable: bool) -> Head<Var> {
    params.map(|_, t| tape.leaf(t.clone(), trainable))
}

pub fn bind_prompts(
    tape: &mut Tape,
    prompts: &PromptSet<Tensor>,
    trainable: bool,
) -> PromptSet<Var> {
    prompts
        .try_map::<_, std::convert::Infallible>(&mut |_, t| Ok(tape.leaf(t.clone(), trainable)))
        .unwrap_or_else(|e| match e {})
}

fn lead_and_tail(shape: &[usize], tail: usize) -> (Vec<usize>, usize) {
    let lead = shape[..shape.len() - tail].to_vec();
    let count = lead.iter().product();
    (lead, count)
}

/// `σ(W_m · Trans(x) + b_m)`: `[.., T, N] → [.., N, T, D]`.
pub fn input_map(tape: &mut Tape, x: Var, backbone: &Backbone<Var>) -> Result<Var, TensorError> {
    if tape.shape(x).len() < 2 {
        return Err(TensorError::Dimension {
            op: "input_map",
            message: format!("expected [.., T, N], got {:?}", tape.shape(x)),
        });
    }
    let transposed = tape.transpose_last2(x)?;
    let mut column = tape.shape(transposed).to_vec();
    column.push(1);
    let column = tape.reshape(transposed, &column)?;
    let projected = tape.matmul(column, backbone.input_weight)?;
    let shifted = tape.add(projected, backbone.input_bias)?;
    tape.sigmoid(shifted)
}

/// Multi-head scaled dot-product self-attention over `[.., L, D]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayer<Var>,
    heads: usize,
) -> Result<Var, TensorError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(TensorError::Dimension {
            op: "attention",
            message: format!("expected [.., L, D], got {shape:?}"),
        });
    }
    let (len, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Dimension {
            op: "attention",
            message: format!("width {d} not divisible by {heads} heads"),
        });
    }
    let d_k = d / heads;
    let (_, batch) = lead_and_tail(&shape, 2);
    let flat = tape.reshape(x, &[batch, len, d])?;

    let split = |tape: &mut Tape, w: Var| -> Result<Var, TensorError> {
        let p = tape.matmul(flat, w)?;
        let p = tape.reshape(p, &[batch, len, heads, d_k])?;
        tape.permute(p, &[0, 2, 1, 3])
    };
    let q = split(tape, layer.wq)?;
    let k = split(tape, layer.wk)?;
    let v = split(tape, layer.wv)?;

    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax_lastaxis(scores)?;
    let attended = tape.matmul(weights, v)?;
    let merged = tape.permute(attended, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[batch, len, d])?;
    let out = tape.matmul(merged, layer.wo)?;
    tape.reshape(out, &shape)
}

/// `M(x) = LayerNorm(x + MHAtt(x, x, x))`.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayer<Var>,
    heads: usize,
) -> Result<Var, TensorError> {
    let attended = multi_head_attention(tape, x, layer, heads)?;
    let residual = tape.add(x, attended)?;
    tape.layer_norm(residual, layer.attn_norm_gain, layer.attn_norm_bias)
}

/// `F(x) = LayerNorm(x + W_2 ReLU(W_1 x + b_1) + b_2)`, applied per position.
pub fn feed_forward_block(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayer<Var>,
) -> Result<Var, TensorError> {
    let hidden = tape.matmul(x, layer.ff_w1)?;
    let hidden = tape.add(hidden, layer.ff_b1)?;
    let hidden = tape.relu(hidden)?;
    let out = tape.matmul(hidden, layer.ff_w2)?;
    let out = tape.add(out, layer.ff_b2)?;
    let residual = tape.add(x, out)?;
    tape.layer_norm(residual, layer.ff_norm_gain, layer.ff_norm_bias)
}

/// One encoder layer `F(M(x))` over `[.., L, D]`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayer<Var>,
    heads: usize,
) -> Result<Var, TensorError> {
    let attended = attention_block(tape, x, layer, heads)?;
    feed_forward_block(tape, attended, layer)
}

/// Temporal encoder: `[.., T, N] → [.., N, D]` (the last timestep).
pub fn temporal_encode(
    tape: &mut Tape,
    x: Var,
    backbone: &Backbone<Var>,
    prompts: Option<&PromptSet<Var>>,
    heads: usize,
) -> Result<Var, TensorError> {
    temporal_encode_traced(tape, x, backbone, prompts, heads, &mut Vec::new())
}

fn temporal_encode_traced(
    tape: &mut Tape,
    x: Var,
    backbone: &Backbone<Var>,
    prompts: Option<&PromptSet<Var>>,
    heads: usize,
    trace: &mut Vec<LayerTrace>,
) -> Result<Var, TensorError> {
    let embedded = input_map(tape, x, backbone)?;
    let mut z = tape.add(embedded, backbone.temporal_pos)?;
    for (l, layer) in backbone.temporal.iter().enumerate() {
        let input_len = tape.shape(z)[tape.shape(z).len() - 2];
        let (augmented, truncation) = prompt::inject_temporal(tape, z, l, prompts)?;
        let augmented_len = tape.shape(augmented)[tape.shape(augmented).len() - 2];
        let shape = tape.shape(augmented).to_vec();
        let (_, batch) = lead_and_tail(&shape, 2);
        let flat = tape.reshape(augmented, &[batch, augmented_len, shape[shape.len() - 1]])?;
        let out = encoder_layer(tape, flat, layer, heads)?;
        let out = tape.reshape(out, &shape)?;
        z = prompt::truncate(tape, out, truncation)?;
        trace.push(LayerTrace {
            input_len,
            augmented_len,
            output_len: tape.shape(z)[tape.shape(z).len() - 2],
        });
    }
    let shape = tape.shape(z).to_vec();
    let time_axis = shape.len() - 2;
    let last = tape.slice_axis(z, time_axis, shape[time_axis] - 1, shape[time_axis])?;
    let mut out_shape = shape;
    out_shape.remove(time_axis);
    tape.reshape(last, &out_shape)
}

/// Spatial encoder: `[.., N, D] → [.., N, D]`.
pub fn spatial_encode(
    tape: &mut Tape,
    z_temp: Var,
    backbone: &Backbone<Var>,
    prompts: Option<&PromptSet<Var>>,
    heads: usize,
) -> Result<Var, TensorError> {
    spatial_encode_traced(tape, z_temp, backbone, prompts, heads, &mut Vec::new())
}

fn spatial_encode_traced(
    tape: &mut Tape,
    z_temp: Var,
    backbone: &Backbone<Var>,
    prompts: Option<&PromptSet<Var>>,
    heads: usize,
    trace: &mut Vec<LayerTrace>,
) -> Result<Var, TensorError> {
    let mut z = tape.add(z_temp, backbone.spatial_pos)?;
    for (l, layer) in backbone.spatial.iter().enumerate() {
        let input_len = tape.shape(z)[tape.shape(z).len() - 2];
        let (augmented, truncation) = prompt::inject_spatial(tape, z, l, prompts)?;
        let augmented_len = tape.shape(augmented)[tape.shape(augmented).len() - 2];
        let out = encoder_layer(tape, augmented, layer, heads)?;
        z = prompt::truncate(tape, out, truncation)?;
        trace.push(LayerTrace {
            input_len,
            augmented_len,
            output_len: tape.shape(z)[tape.shape(z).len() - 2],
        });
    }
    Ok(z)
}

/// `σ(W_h z + b_h)`: `[.., N, D] → [.., N, H]`.
pub fn head(tape: &mut Tape, z_spa: Var, head: &Head<Var>) -> Result<Var, TensorError> {
    let projected = tape.matmul(z_spa, head.weight)?;
    let shifted = tape.add(projected, head.bias)?;
    tape.sigmoid(shifted)
}

/// Full pipeline over independent attribute sequences: `[S, T, N] → [S, N, H]`.
///
/// Every sequence goes through the same parameters; nothing mixes sequences.
pub fn forward_sequences(
    tape: &mut Tape,
    x: Var,
    backbone: &Backbone<Var>,
    head_params: &Head<Var>,
    prompts: Option<&PromptSet<Var>>,
    heads: usize,
) -> Result<Var, TensorError> {
    forward_sequences_traced(tape, x, backbone, head_params, prompts, heads).map(|(v, _)| v)
}

/// [`forward_sequences`] that also reports per-layer sequence lengths.
pub fn forward_sequences_traced(
    tape: &mut Tape,
    x: Var,
    backbone: &Backbone<Var>,
    head_params: &Head<Var>,
    prompts: Option<&PromptSet<Var>>,
    heads: usize,
) -> Result<(Var, EncoderTrace), TensorError> {
    let mut trace = EncoderTrace::default();
    let z = temporal_encode_traced(tape, x, backbone, prompts, heads, &mut trace.temporal)?;
    let z = spatial_encode_traced(tape, z, backbone, prompts, heads, &mut trace.spatial)?;
    Ok((head(tape, z, head_params)?, trace))
}

/// Inference over a batch of sequences `[S, T, N] → [S, N, H]`.
pub fn predict_sequences(
    config: &ModelConfig,
    params: &ModelParameters,
    prompts: Option<&PromptSet>,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let backbone = bind_backbone(&mut tape, &params.backbone, false);
    let head_params = bind_head(&mut tape, &params.head, false);
    let prompts = prompts.map(|p| bind_prompts(&mut tape, p, false));
    let xv = tape.constant(x.clone());
    let y = forward_sequences(
        &mut tape,
        xv,
        &backbone,
        &head_params,
        prompts.as_ref(),
        config.heads,
    )?;
    Ok(tape.value(y).clone())
}

/// Predicts one multi-attribute window `T×N×C`, returning `H×N×C`.
///
/// This is inference only; parameters are recorded as constants.
pub fn forward(
    config: &ModelConfig,
    params: &ModelParameters,
    prompts: Option<&PromptSet>,
    window: &Tensor,
) -> Result<Tensor, Error> {
    let [t, n, c] = window.shape()[..] else {
        return Err(ConfigError::Mismatch(format!(
            "expected a T×N×C window, got {:?}",
            window.shape()
        ))
        .into());
    };
    if t != config.input_len || n != config.regions {
        return Err(ConfigError::Mismatch(format!(
            "window {:?} does not match T={} N={}",
            window.shape(),
            config.input_len,
            config.regions
        ))
        .into());
    }
    let mut tape = Tape::new();
    let x = tape.constant(window.clone());
    let x = tape.permute(x, &[2, 0, 1])?;
    let backbone = bind_backbone(&mut tape, &params.backbone, false);
    let head_params = bind_head(&mut tape, &params.head, false);
    let prompts = prompts.map(|p| bind_prompts(&mut tape, p, false));
    let y = forward_sequences(
        &mut tape,
        x,
        &backbone,
        &head_params,
        prompts.as_ref(),
        config.heads,
    )?;
    debug_assert_eq!(tape.shape(y), &[c, n, config.horizon]);
    let y = tape.permute(y, &[2, 1, 0])?;
    Ok(tape.value(y).clone())
}
