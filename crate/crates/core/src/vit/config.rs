use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which GELU definition the MLP blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluErf,
    GeluTanh,
}

/// Per-channel input standardisation `(x - mean) / std`, applied to raw
/// `[0, 1]` pixels at the start of every forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Transformer hyper-geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// `None` means identity.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// A square-image config with identity normalisation and exact GELU.
    #[allow(clippy::too_many_arguments)]
    pub fn square(
        image_size: usize,
        channels: usize,
        patch_size: usize,
        embed_dim: usize,
        num_layers: usize,
        num_heads: usize,
        mlp_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            image_width: image_size,
            image_height: image_size,
            channels,
            patch_size,
            embed_dim,
            num_layers,
            num_heads,
            mlp_dim,
            num_classes,
            normalization: None,
            activation: Activation::GeluErf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.image_width.is_multiple_of(self.patch_size) || !self.image_height.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is not a multiple of patch size {}",
                self.image_width, self.image_height, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if let Some(norm) = &self.normalization {
            if norm.mean.len() != self.channels || norm.std.len() != self.channels {
                return Err(Error::InvalidConfig(format!(
                    "normalization needs {} channels",
                    self.channels
                )));
            }
            if norm.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
                || norm.mean.iter().any(|m| !m.is_finite())
            {
                return Err(Error::InvalidConfig(
                    "normalization constants must be finite with positive std".into(),
                ));
            }
        }
        Ok(())
    }

    /// Patch grid `(n_w, n_h)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_width / self.patch_size,
            self.image_height / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (w, h) = self.grid();
        w * h
    }

    /// Tokens per sequence, including the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    /// Length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Canonical parameter names and shapes, in storage order.
    ///
    /// Linear weights are stored input-major (`[in, out]`) so a layer is
    /// `x · W + b`.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_patches(), d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            specs.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, self.mlp_dim]),
                (p("mlp.fc1.bias"), vec![self.mlp_dim]),
                (p("mlp.fc2.weight"), vec![self.mlp_dim, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        specs.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_b16_geometry() {
        let cfg = ModelConfig::square(224, 3, 16, 768, 12, 12, 3072, 1000);
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), (14, 14));
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.parameter_specs().len(), 4 + 12 * 12 + 4);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = ModelConfig::square(30, 3, 10, 8, 1, 2, 8, 2);
        cfg.validate().unwrap();
        cfg.image_width = 31;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::square(30, 3, 10, 9, 1, 2, 8, 2);
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::square(30, 3, 10, 8, 0, 2, 8, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let json = r#"{"image_width":30,"image_height":30,"channels":3,"patch_size":10,
            "embed_dim":8,"num_layers":1,"num_heads":2,"mlp_dim":8,"num_classes":2}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.activation, Activation::GeluErf);
        assert!(cfg.normalization.is_none());
    }
}
