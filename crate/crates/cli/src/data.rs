//! Image decoding and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use vetocert::{Image, ModelConfig};

use crate::GeometryMismatch;

const RAW_EXTENSIONS: &[&str] = &["f32", "raw"];
const PIXEL_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn is_raw(path: &Path) -> bool {
    extension(path).is_some_and(|e| RAW_EXTENSIONS.contains(&e.as_str()))
}

/// Loads an image as `[0, 1]` pixels in the model's layout.
///
/// Raw files are little-endian f32, HWC, exactly `H*W*C` values. Everything
/// else goes through the image decoder as 8-bit grey or RGB.
pub fn load_image(path: &Path, config: &ModelConfig, force_raw: bool) -> Result<Image> {
    let (h, w, c) = (config.image_height, config.image_width, config.channels);
    if force_raw || is_raw(path) {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if bytes.len() != h * w * c * 4 {
            return Err(GeometryMismatch(format!(
                "{}: {} bytes, model expects {}x{}x{} f32 values ({} bytes)",
                path.display(),
                bytes.len(),
                w,
                h,
                c,
                h * w * c * 4
            ))
            .into());
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        return Ok(Image::from_vec(h, w, c, data)?);
    }

    let decoded = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()
        .with_context(|| format!("reading {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    if decoded.width() as usize != w || decoded.height() as usize != h {
        return Err(GeometryMismatch(format!(
            "{}: image is {}x{}, model expects {}x{}",
            path.display(),
            decoded.width(),
            decoded.height(),
            w,
            h
        ))
        .into());
    }
    let bytes = match c {
        1 => decoded.to_luma8().into_raw(),
        3 => decoded.to_rgb8().into_raw(),
        _ => {
            return Err(GeometryMismatch(format!(
                "{}: {c}-channel models only accept raw input",
                path.display()
            ))
            .into())
        }
    };
    let data = bytes.into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Image::from_vec(h, w, c, data)?)
}

/// Writes `image` as 8-bit PNG (1 or 3 channels).
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match image.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => bail!("cannot write a {c}-channel PNG"),
    };
    image::save_buffer(path, &bytes, image.width() as u32, image.height() as u32, color)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn write_raw(values: &[f32], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_raw(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() % 4 != 0 {
        bail!("{}: length {} is not a multiple of 4", path.display(), bytes.len());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Image files in a directory, sorted by name.
pub fn list_inputs(dir: &Path, force_raw: bool) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let wanted = force_raw
            || is_raw(&path)
            || extension(&path).is_some_and(|e| PIXEL_EXTENSIONS.contains(&e.as_str()));
        if wanted {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no input images", dir.display());
    }
    Ok(paths)
}

#[derive(Debug, Clone, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

/// A labelled dataset. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// CSV with a `path,label` header, or a JSON array of `{path, label}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let entries: Vec<ManifestEntry> = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            csv::Reader::from_reader(text.as_bytes())
                .deserialize()
                .collect::<Result<_, _>>()
                .with_context(|| format!("parsing {}", path.display()))?
        };
        if entries.is_empty() {
            bail!("{}: manifest is empty", path.display());
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Loads every image, checking labels against the class count.
    pub fn load_images(&self, config: &ModelConfig) -> Result<Vec<(Image, usize)>> {
        self.entries
            .iter()
            .map(|e| {
                if e.label >= config.num_classes {
                    bail!("{}: label {} outside 0..{}", e.path, e.label, config.num_classes);
                }
                Ok((load_image(&self.resolve(e), config, false)?, e.label))
            })
            .collect()
    }
}
