//! The PVWT weight container and deterministic random initialisation.
//!
//! Byte layout (all integers little-endian):
//!
//! | field          | size            | notes                                  |
//! |----------------|-----------------|----------------------------------------|
//! | magic          | 4               | ASCII `PVWT`                           |
//! | version        | u32             | currently 1                            |
//! | config length  | u32             | bytes of the config document           |
//! | config         | config length   | UTF-8 JSON [`ModelConfig`]             |
//! | tensor count   | u32             |                                        |
//! | directory      | per tensor      | see below                              |
//! | payload length | u64             | bytes                                  |
//! | payload        | payload length  | f32 little-endian, row-major           |
//!
//! Each directory entry is `name length: u16`, `name: UTF-8`, `rank: u8`,
//! `dims: rank × u64`, `offset: u64` (bytes from the start of the payload).
//! Entries must tile the payload exactly with no overlap and no gaps.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, WeightStore};

pub const MAGIC: [u8; 4] = *b"PVWT";
pub const VERSION: u32 = 1;

/// Default standard deviation of [`random_init`].
pub const INIT_STD: f64 = 0.02;

/// Structural problems in a PVWT file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"PVWT\"")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {what}: need {needed} bytes, {available} left")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("corrupt tensor directory: {0}")]
    CorruptDirectory(String),

    #[error("invalid config document: {0}")]
    Config(String),

    #[error("tensor {name} has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serialises a store in canonical parameter order.
pub fn encode(config: &ModelConfig, weights: &WeightStore) -> Result<Vec<u8>> {
    weights.validate(config)?;
    let config_doc = serde_json::to_vec(config).map_err(|e| FormatError::Config(e.to_string()))?;
    let specs = config.parameter_specs();

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_doc.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_doc);
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());

    let mut offset = 0u64;
    for (name, shape) in &specs {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * shape.iter().product::<usize>() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (name, _) in &specs {
        for v in weights.require(name)?.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container and audits every tensor against the embedded config.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, WeightStore)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| FormatError::Config(e.to_string()))?;
    config
        .validate()
        .map_err(|e| FormatError::Config(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| FormatError::CorruptDirectory("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(to_usize(r.u64("tensor dim")?)?);
        }
        let offset = to_usize(r.u64("tensor offset")?)?;
        entries.push(Entry {
            name,
            shape,
            offset,
        });
    }
    let payload_len = to_usize(r.u64("payload length")?)?;
    let payload = r.take(payload_len, "payload")?;
    if r.pos != bytes.len() {
        return Err(FormatError::CorruptDirectory(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        ))
        .into());
    }

    // Entries must tile the payload: sorted by offset, each starting where
    // the previous one ended.
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for e in &entries {
        let len = e
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::CorruptDirectory(format!("{} is too large", e.name)))?;
        spans.push((e.offset, len, &e.name));
    }
    spans.sort_unstable();
    let mut cursor = 0usize;
    for &(offset, len, name) in &spans {
        if offset != cursor {
            return Err(FormatError::CorruptDirectory(format!(
                "{name} starts at byte {offset}, expected {cursor}"
            ))
            .into());
        }
        cursor = offset
            .checked_add(len)
            .ok_or_else(|| FormatError::CorruptDirectory(format!("{name} overflows")))?;
    }
    if cursor != payload_len {
        return Err(FormatError::CorruptDirectory(format!(
            "tensors cover {cursor} bytes of a {payload_len}-byte payload"
        ))
        .into());
    }

    let specs = config.parameter_specs();
    for e in &entries {
        match specs.iter().find(|(n, _)| *n == e.name) {
            None => return Err(FormatError::UnexpectedTensor(e.name.clone()).into()),
            Some((_, expected)) if *expected != e.shape => {
                return Err(FormatError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: expected.clone(),
                    found: e.shape.clone(),
                }
                .into())
            }
            Some(_) => {}
        }
    }
    let mut store = WeightStore::new();
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let data = payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if store
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(FormatError::CorruptDirectory(format!("duplicate tensor {}", e.name)).into());
        }
    }
    if let Some((name, _)) = specs.iter().find(|(n, _)| store.get(n).is_none()) {
        return Err(FormatError::MissingTensor(name.clone()).into());
    }
    Ok((config, store))
}

fn to_usize(v: u64) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::CorruptDirectory(format!("value {v} overflows")))
}

pub fn save(config: &ModelConfig, weights: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(config, weights)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightStore)> {
    decode(&fs::read(path)?)
}

/// Knobs of [`random_init_with`].
///
/// The gains multiply the drawn values of the patch projection, the
/// query/key/value projections and the classification head. Raising them
/// makes attention sharper and predictions more sensitive to local content,
/// which is what fuzzing wants from a toy model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub std: f64,
    pub patch_gain: f64,
    pub attention_gain: f64,
    pub head_gain: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            std: INIT_STD,
            patch_gain: 1.0,
            attention_gain: 1.0,
            head_gain: 1.0,
        }
    }
}

impl InitOptions {
    /// Toy settings under which patch attacks flip predictions often while
    /// most clean inputs stay verified.
    pub fn fragile() -> Self {
        Self {
            std: 0.3,
            patch_gain: 3.0,
            attention_gain: 3.0,
            head_gain: 3.0,
        }
    }
}

/// Deterministic weights for `config` with default [`InitOptions`].
pub fn random_init(config: &ModelConfig, seed: u64) -> WeightStore {
    random_init_with(config, seed, InitOptions::default())
}

/// Deterministic weights drawn from a ChaCha8 stream seeded with
/// `seed_from_u64(seed)`.
///
/// Parameters are filled in canonical order. Layer-norm gains are 1 and
/// layer-norm biases 0; every other value is a standard normal draw
/// (resampled outside ±2) times `std` and the matching gain, rounded to f32.
pub fn random_init_with(config: &ModelConfig, seed: u64, options: InitOptions) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (name, shape) in config.parameter_specs() {
        let is_norm = name.starts_with("norm.") || name.contains(".norm");
        let gain = match name.as_str() {
            "patch_embed.weight" => options.patch_gain,
            "head.weight" => options.head_gain,
            n if n.ends_with("attn.qkv.weight") => options.attention_gain,
            _ => 1.0,
        };
        let tensor = if is_norm && name.ends_with(".weight") {
            Tensor::full(shape, 1.0)
        } else if is_norm {
            Tensor::zeros(shape)
        } else {
            Tensor::from_fn(shape, |_| {
                (truncated_normal(&mut rng) * options.std * gain) as f32
            })
        };
        store.insert(name, tensor);
    }
    store
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
