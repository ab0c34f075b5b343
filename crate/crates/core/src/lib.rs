//! Certified detection of adversarial patches for Vision Transformers.
//!
//! A classifier's prediction is accepted only when every pass of a sliding
//! family of attention masks agrees with the unmasked pass. Each mask hides a
//! block of patch tokens large enough to swallow any admissible adversarial
//! patch, so for any patched input at least one masked pass sees only clean
//! pixels; an effective patch on a verified image can therefore never be
//! verified itself.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the canonical `f32` engine.

pub mod adversary;
pub mod certify;
pub mod error;
pub mod io;
pub mod mask;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use adversary::{apply_patch, greedy_attack, random_attack, AttackReport, PatchPlacement};
pub use certify::{Certifier, CertifiedOutput, EvalCounts, EvalMetrics, MaskedClassifier};
pub use error::{Error, Result};
pub use mask::{
    build_plan, mask_to_bias, required_extent, tainted_cells, verify_coverage, AdversaryGeometry,
    ImageGeometry, MaskPlan, MaskSpec,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use vit::{AttentionBias, Image, Logits, MaskingMode, ModelConfig, VisionTransformer, WeightStore};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ImageF32 = Image<f32>;
pub type ImageF64 = Image<f64>;
pub type WeightsF32 = WeightStore<f32>;
pub type WeightsF64 = WeightStore<f64>;
pub type ViTF32 = VisionTransformer<f32>;
pub type ViTF64 = VisionTransformer<f64>;
