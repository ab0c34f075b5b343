//! Vision Transformer classifier whose attention can be restricted per
//! inference.

mod config;
mod image;
mod model;
mod weights;

pub use config::{Activation, ModelConfig, Normalization};
pub use image::{patchify, unpatchify, AttentionBias, Image};
pub use model::{embed, Logits, MaskingMode, VisionTransformer};
pub use weights::WeightStore;
