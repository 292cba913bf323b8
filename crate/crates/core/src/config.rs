//! Engine configuration: desk-scale defaults and the full-scale shape table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::SyntheticModelConfig;
use crate::neural::BackboneConfig;
use crate::subdivision::DEFAULT_MAX_LEVEL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvatarConfig {
    pub seed: u64,
    /// Source image `(width, height)`; the build camera uses the same size.
    pub image_size: (usize, usize),
    pub camera_distance: f64,
    pub model: SyntheticModelConfig,
    pub backbone: BackboneConfig,
    /// Width of the per-vertex positional encoding and global features.
    pub pe_dim: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub max_level: usize,
    /// Gaussian feature channels; the first three are RGB.
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// Init range multiplier of the attribute output layers.
    pub output_gain: f32,
    pub opacity_bias: f32,
    /// Init range multiplier of the vertex-offset output layer.
    pub offset_gain: f32,
    /// Depth tolerance of the visibility test; `None` uses
    /// `1e-3 * (far - near)`.
    pub visibility_epsilon: Option<f64>,
    /// Shoulder pixels must lie at or below row `eta * height`.
    pub shoulder_eta: f64,
    pub shoulder_gain: f32,
    pub refiner_width: usize,
    pub loss_weights: LossWeights,
}

impl Default for AvatarConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AvatarConfig {
    /// Small configuration used by tests and the default CLI path.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            image_size: (140, 140),
            camera_distance: 20.0,
            model: SyntheticModelConfig::default(),
            backbone: BackboneConfig::default(),
            pe_dim: 64,
            attention_layers: 2,
            attention_heads: 8,
            max_level: DEFAULT_MAX_LEVEL,
            feature_dim: 32,
            head_hidden: 64,
            output_gain: 0.5,
            opacity_bias: 1.0,
            offset_gain: 0.02,
            visibility_epsilon: None,
            shoulder_eta: 0.5,
            shoulder_gain: 0.5,
            refiner_width: 8,
            loss_weights: LossWeights::default(),
        }
    }

    /// Benchmark configuration: 5023 base vertices at 512x512, about 90K
    /// Gaussians at the finest level.
    pub fn bench() -> Self {
        let mut c = Self::desk();
        c.image_size = (512, 512);
        c.model.vertex_count = 5023;
        c.backbone.local_size = (160, 160);
        c
    }

    /// Dimensions of the full-size system (configuration only).
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.image_size = (518, 518);
        c.model.vertex_count = 5023;
        c.backbone = BackboneConfig {
            patch: 14,
            local_channels: 256,
            local_size: (296, 296),
            identity_dim: 768,
            seed: 0,
        };
        c.pe_dim = 256;
        c.attention_layers = 2;
        c.attention_heads = 8;
        c.head_hidden = 256;
        c
    }

    pub fn identity_tokens(&self) -> usize {
        (self.image_size.0 / self.backbone.patch) * (self.image_size.1 / self.backbone.patch)
    }

    pub fn shapes(&self) -> ShapeTable {
        ShapeTable {
            positional_encoding: (self.model.vertex_count, self.pe_dim),
            local_feature: (
                self.backbone.local_channels,
                self.backbone.local_size.0,
                self.backbone.local_size.1,
            ),
            identity_tokens: (self.identity_tokens(), self.backbone.identity_dim),
            attention: (self.attention_layers, self.attention_heads),
            loss_weights: self.loss_weights.as_array(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.pe_dim == 0 || self.feature_dim < 3 || self.head_hidden == 0 {
            return bad(format!(
                "pe_dim {}, feature_dim {} (>= 3) and head_hidden {} must be positive",
                self.pe_dim, self.feature_dim, self.head_hidden
            ));
        }
        if self.attention_heads == 0 || self.pe_dim % self.attention_heads != 0 {
            return Err(Error::HeadsIndivisible {
                dim: self.pe_dim,
                heads: self.attention_heads,
            });
        }
        if self.image_size.0 < self.backbone.patch || self.image_size.1 < self.backbone.patch {
            return bad(format!("image {:?} is smaller than one patch", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.shoulder_eta) {
            return bad(format!("shoulder_eta {} must lie in [0, 1]", self.shoulder_eta));
        }
        if let Some(e) = self.visibility_epsilon {
            if !(e >= 0.0) {
                return bad(format!("visibility epsilon {e} must be >= 0"));
            }
        }
        self.loss_weights.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Tensor shapes implied by a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTable {
    pub positional_encoding: (usize, usize),
    pub local_feature: (usize, usize, usize),
    pub identity_tokens: (usize, usize),
    pub attention: (usize, usize),
    pub loss_weights: [f64; 4],
}
