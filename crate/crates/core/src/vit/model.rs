use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    self, add, gelu, gelu_tanh, layer_norm, linear, masked_softmax, matmul, matmul_transposed,
    sentinel_softmax, Tensor, LAYER_NORM_EPS,
};

use super::{patchify, Activation, AttentionBias, Image, ModelConfig, WeightStore};

/// How an [`AttentionBias`] is enforced inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MaskingMode {
    /// Masked tokens stay in the sequence but are removed as attention keys
    /// for every query in every layer.
    #[default]
    KeyExclusion,
    /// Masked tokens are dropped right after embedding (position embeddings
    /// of the survivors are kept).
    TokenDropping,
    /// The bias is ignored. Unsound; used to check that falsification tests
    /// can tell.
    Disabled,
    /// Disallowed attention logits are overwritten with this finite value
    /// instead of being excluded. Unsound for the same reason.
    LeakySentinel(f64),
}

/// Raw class scores of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T: Scalar = f32> {
    pub scores: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    /// Arg-max class, lowest index on ties.
    pub fn predict(&self) -> usize {
        tensor::argmax(&self.scores).expect("at least one class")
    }

    /// Gap between the best and the runner-up score; infinite for one class.
    pub fn margin(&self) -> f64 {
        let best = self.predict();
        let top = self.scores[best].to_f64_lossy();
        self.scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, v)| top - v.to_f64_lossy())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.scores.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct Block<T: Scalar> {
    norm1: (Tensor<T>, Tensor<T>),
    query: (Tensor<T>, Tensor<T>),
    key: (Tensor<T>, Tensor<T>),
    value: (Tensor<T>, Tensor<T>),
    proj: (Tensor<T>, Tensor<T>),
    norm2: (Tensor<T>, Tensor<T>),
    fc1: (Tensor<T>, Tensor<T>),
    fc2: (Tensor<T>, Tensor<T>),
}

/// A validated, immutable ViT ready for concurrent inference.
#[derive(Debug, Clone)]
pub struct VisionTransformer<T: Scalar = f32> {
    config: ModelConfig,
    patch_embed: (Tensor<T>, Tensor<T>),
    cls_token: Tensor<T>,
    pos_embed: Tensor<T>,
    blocks: Vec<Block<T>>,
    norm: (Tensor<T>, Tensor<T>),
    head: (Tensor<T>, Tensor<T>),
    pixel_shift: Vec<T>,
    pixel_scale: Vec<T>,
    mode: MaskingMode,
}

/// Token sequence `[1 + n, d]`: the class embedding followed by each patch
/// projected and offset by its position embedding.
pub fn embed<T: Scalar>(
    patches: &Tensor<T>,
    weights: &WeightStore<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    weights.validate(config)?;
    embed_tokens(
        patches,
        (weights.require("patch_embed.weight")?, weights.require("patch_embed.bias")?),
        weights.require("cls_token")?,
        weights.require("pos_embed")?,
    )
}

fn embed_tokens<T: Scalar>(
    patches: &Tensor<T>,
    (w, b): (&Tensor<T>, &Tensor<T>),
    cls: &Tensor<T>,
    pos: &Tensor<T>,
) -> Result<Tensor<T>> {
    let projected = add(&linear(patches, w, b)?, pos)?;
    let (n, d) = projected.dims2("embed")?;
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(cls.data());
    data.extend_from_slice(projected.data());
    Tensor::new(vec![n + 1, d], data)
}

impl<T: Scalar> VisionTransformer<T> {
    pub fn new(config: ModelConfig, weights: &WeightStore<T>) -> Result<Self> {
        weights.validate(&config)?;
        let pair = |w: &str, b: &str| -> Result<(Tensor<T>, Tensor<T>)> {
            Ok((weights.require(w)?.clone(), weights.require(b)?.clone()))
        };
        let d = config.embed_dim;
        let blocks = (0..config.num_layers)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                let (qkv_w, qkv_b) = pair(&p("attn.qkv.weight"), &p("attn.qkv.bias"))?;
                let qkv_b = qkv_b.reshape(vec![1, 3 * d])?;
                let split = |i: usize| -> Result<(Tensor<T>, Tensor<T>)> {
                    Ok((
                        qkv_w.columns(i * d, d)?,
                        qkv_b.columns(i * d, d)?.reshape(vec![d])?,
                    ))
                };
                Ok(Block {
                    norm1: pair(&p("norm1.weight"), &p("norm1.bias"))?,
                    query: split(0)?,
                    key: split(1)?,
                    value: split(2)?,
                    proj: pair(&p("attn.proj.weight"), &p("attn.proj.bias"))?,
                    norm2: pair(&p("norm2.weight"), &p("norm2.bias"))?,
                    fc1: pair(&p("mlp.fc1.weight"), &p("mlp.fc1.bias"))?,
                    fc2: pair(&p("mlp.fc2.weight"), &p("mlp.fc2.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (pixel_shift, pixel_scale) = match &config.normalization {
            Some(n) => (
                n.mean.iter().map(|&m| T::lit(m)).collect(),
                n.std.iter().map(|&s| T::lit(s)).collect(),
            ),
            None => (vec![T::zero(); config.channels], vec![T::one(); config.channels]),
        };
        Ok(Self {
            patch_embed: pair("patch_embed.weight", "patch_embed.bias")?,
            cls_token: weights.require("cls_token")?.clone(),
            pos_embed: weights.require("pos_embed")?.clone(),
            blocks,
            norm: pair("norm.weight", "norm.bias")?,
            head: pair("head.weight", "head.bias")?,
            pixel_shift,
            pixel_scale,
            mode: MaskingMode::KeyExclusion,
            config,
        })
    }

    pub fn with_masking_mode(mut self, mode: MaskingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn masking_mode(&self) -> MaskingMode {
        self.mode
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn normalize(&self, image: &Image<T>) -> Image<T> {
        if self.config.normalization.is_none() {
            return image.clone();
        }
        let c = self.config.channels;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.pixel_shift[i % c]) / self.pixel_scale[i % c];
        }
        out
    }

    /// Input tokens `[1 + n, d]` for an image.
    pub fn embed_image(&self, image: &Image<T>) -> Result<Tensor<T>> {
        image.check_matches(&self.config)?;
        let patches = patchify(&self.normalize(image), &self.config)?;
        embed_tokens(
            &patches,
            (&self.patch_embed.0, &self.patch_embed.1),
            &self.cls_token,
            &self.pos_embed,
        )
    }

    fn check_bias(&self, bias: Option<&AttentionBias>) -> Result<()> {
        if let Some(b) = bias {
            if b.num_tokens() != self.config.num_tokens() {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "bias over {} tokens, model has {}",
                        b.num_tokens(),
                        self.config.num_tokens()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Class scores with attention restricted by `bias` (`None` = vanilla).
    pub fn forward(&self, image: &Image<T>, bias: Option<&AttentionBias>) -> Result<Logits<T>> {
        self.check_bias(bias)?;
        let tokens = self.embed_image(image)?;
        self.forward_tokens(&tokens, bias)
    }

    /// One forward pass per bias, sharing the embedding of `image`.
    ///
    /// Each result is bit-identical to the corresponding [`Self::forward`].
    pub fn forward_many(
        &self,
        image: &Image<T>,
        biases: &[Option<&AttentionBias>],
    ) -> Result<Vec<Logits<T>>> {
        for b in biases {
            self.check_bias(*b)?;
        }
        let tokens = self.embed_image(image)?;
        biases
            .iter()
            .map(|b| self.forward_tokens(&tokens, *b))
            .collect()
    }

    fn forward_tokens(&self, tokens: &Tensor<T>, bias: Option<&AttentionBias>) -> Result<Logits<T>> {
        let cls = match (self.mode, bias) {
            (MaskingMode::Disabled, _) | (_, None) => {
                self.encode(tokens.clone(), &vec![true; self.config.num_tokens()])?
            }
            (MaskingMode::TokenDropping, Some(b)) => {
                let kept = tokens.select_rows(&b.allowed_tokens())?;
                let visible = vec![true; kept.dims2("forward")?.0];
                self.encode(kept, &visible)?
            }
            (_, Some(b)) => self.encode(tokens.clone(), b.allowed())?,
        };
        self.classify(&cls)
    }

    pub fn predict(&self, image: &Image<T>, bias: Option<&AttentionBias>) -> Result<usize> {
        Ok(self.forward(image, bias)?.predict())
    }

    /// Runs the encoder and returns the final class-token row `[1, d]`.
    ///
    /// Rows are independent outside attention, so the last block only
    /// computes the class row; every value it produces is bit-identical to
    /// the full computation.
    fn encode(&self, mut x: Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
        let eps = T::lit(LAYER_NORM_EPS);
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let h = layer_norm(&x, &block.norm1.0, &block.norm1.1, eps)?;
            let queries = if i == last { h.select_rows(&[0])? } else { h.clone() };
            let attn = self.attention(&queries, &h, block, allowed)?;
            if i == last {
                x = x.select_rows(&[0])?;
            }
            x = add(&x, &attn)?;
            let h = layer_norm(&x, &block.norm2.0, &block.norm2.1, eps)?;
            let hidden = linear(&h, &block.fc1.0, &block.fc1.1)?;
            let hidden = match self.config.activation {
                Activation::GeluErf => gelu(&hidden),
                Activation::GeluTanh => gelu_tanh(&hidden),
            };
            x = add(&x, &linear(&hidden, &block.fc2.0, &block.fc2.1)?)?;
        }
        Ok(x)
    }

    /// Multi-head attention of the `queries` rows over all rows of `h`.
    fn attention(
        &self,
        queries: &Tensor<T>,
        h: &Tensor<T>,
        block: &Block<T>,
        allowed: &[bool],
    ) -> Result<Tensor<T>> {
        let dh = self.config.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let q = linear(queries, &block.query.0, &block.query.1)?;
        let k = linear(h, &block.key.0, &block.key.1)?;
        let v = linear(h, &block.value.0, &block.value.1)?;
        let heads = (0..self.config.num_heads)
            .map(|head| {
                let qh = q.columns(head * dh, dh)?;
                let kh = k.columns(head * dh, dh)?;
                let vh = v.columns(head * dh, dh)?;
                let scores = matmul_transposed(&qh, &kh)?.scale(scale);
                let weights = match self.mode {
                    MaskingMode::LeakySentinel(s) => sentinel_softmax(&scores, allowed, T::lit(s))?,
                    _ => masked_softmax(&scores, allowed)?,
                };
                matmul(&weights, &vh)
            })
            .collect::<Result<Vec<_>>>()?;
        linear(&Tensor::concat_columns(&heads)?, &block.proj.0, &block.proj.1)
    }

    fn classify(&self, cls: &Tensor<T>) -> Result<Logits<T>> {
        let cls = layer_norm(cls, &self.norm.0, &self.norm.1, T::lit(LAYER_NORM_EPS))?;
        let scores = linear(&cls, &self.head.0, &self.head.1)?.into_data();
        Ok(Logits { scores })
    }
}
