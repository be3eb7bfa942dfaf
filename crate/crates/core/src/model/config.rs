use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Architecture hyper-parameters of the spatio-temporal transformer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input horizon T (timesteps per window).
    pub input_len: usize,
    /// Output horizon H.
    pub horizon: usize,
    /// Region count N.
    pub regions: usize,
    /// Attribute count C.
    pub attributes: usize,
    /// Embedding size D.
    pub d_model: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// Builds a config with `d_k = d_v = d_model / heads` and `d_ff = 4 d_model`.
    pub fn new(
        input_len: usize,
        horizon: usize,
        regions: usize,
        attributes: usize,
        d_model: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let head_width = d_model.checked_div(heads).unwrap_or(0);
        Self {
            input_len,
            horizon,
            regions,
            attributes,
            d_model,
            temporal_layers: layers,
            spatial_layers: layers,
            heads,
            d_k: head_width,
            d_v: head_width,
            d_ff: 4 * d_model,
        }
    }

    /// The reference setting: 12-in/12-out on an 8x8 grid, D = 32, two
    /// layers per encoder, four heads.
    pub fn reference(attributes: usize) -> Self {
        Self::new(12, 12, 64, attributes, 32, 2, 4)
    }

    pub fn with_layers(mut self, temporal: usize, spatial: usize) -> Self {
        self.temporal_layers = temporal;
        self.spatial_layers = spatial;
        self
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("regions", self.regions),
            ("attributes", self.attributes),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError::Model(format!("{name} must be at least 1")));
            }
        }
        if self.heads * self.d_k != self.d_model || self.heads * self.d_v != self.d_model {
            return Err(ConfigError::Model(format!(
                "heads ({}) x d_k ({}) and heads x d_v ({}) must equal d_model ({})",
                self.heads, self.d_k, self.d_v, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_param_count(&self) -> usize {
        self.d_model * self.horizon + self.horizon
    }

    pub fn encoder_layer_param_count(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d
    }

    /// Size of the backbone: input map, positional embeddings and both encoders.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.d_model;
        2 * d
            + self.input_len * d
            + self.regions * d
            + (self.temporal_layers + self.spatial_layers) * self.encoder_layer_param_count()
    }
}
