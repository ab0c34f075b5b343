use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ModelConfig;

/// An `H × W × C` image, channels interleaved, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T: Scalar = f32> {
    pixels: Tensor<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::shape(
                "image",
                format!("expected [H, W, C], got {:?}", pixels.shape()),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::new(vec![height, width, channels], data)?)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            pixels: Tensor::full(vec![height, width, channels], value),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn data(&self) -> &[T] {
        self.pixels.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.pixels.data_mut()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width() + x) * self.channels() + c
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data()[self.index(x, y, c)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.index(x, y, c);
        self.data_mut()[i] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            pixels: self.pixels.cast(),
        }
    }

    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        if self.width() != config.image_width
            || self.height() != config.image_height
            || self.channels() != config.channels
        {
            return Err(Error::shape(
                "image",
                format!(
                    "image is {}x{}x{}, model expects {}x{}x{}",
                    self.width(),
                    self.height(),
                    self.channels(),
                    config.image_width,
                    config.image_height,
                    config.channels
                ),
            ));
        }
        Ok(())
    }
}

/// Which tokens every query may attend to during one inference.
///
/// Index 0 is the class token and is always allowed; index `1 + i` is patch
/// `i` in row-major grid order. At least one patch must stay visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBias {
    allowed: Vec<bool>,
}

impl AttentionBias {
    pub fn new(allowed: Vec<bool>) -> Result<Self> {
        if allowed.first() != Some(&true) {
            return Err(Error::InvalidMask("the class token must stay allowed".into()));
        }
        if !allowed[1..].iter().any(|&a| a) {
            return Err(Error::InvalidMask("every patch token is masked".into()));
        }
        Ok(Self { allowed })
    }

    pub fn all_allowed(num_patches: usize) -> Self {
        Self {
            allowed: vec![true; 1 + num_patches],
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn num_tokens(&self) -> usize {
        self.allowed.len()
    }

    pub fn patch_allowed(&self, patch: usize) -> bool {
        self.allowed[1 + patch]
    }

    /// Token indices that stay visible, class token first.
    pub fn allowed_tokens(&self) -> Vec<usize> {
        (0..self.allowed.len()).filter(|&i| self.allowed[i]).collect()
    }
}

/// Splits an image into `n_w · n_h` flattened patches `[n, P·P·C]`.
///
/// Patches are ordered left to right, top to bottom; within a patch values
/// are ordered by row, then column, then channel.
pub fn patchify<T: Scalar>(image: &Image<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    image.check_matches(config)?;
    let p = config.patch_size;
    let c = config.channels;
    let (n_w, n_h) = config.grid();
    let mut data = Vec::with_capacity(image.data().len());
    for gy in 0..n_h {
        for gx in 0..n_w {
            for py in 0..p {
                let start = image.index(gx * p, gy * p + py, 0);
                data.extend_from_slice(&image.data()[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![n_w * n_h, config.patch_dim()], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, config: &ModelConfig) -> Result<Image<T>> {
    let p = config.patch_size;
    let c = config.channels;
    let (n_w, n_h) = config.grid();
    if patches.shape() != [n_w * n_h, config.patch_dim()] {
        return Err(Error::shape(
            "unpatchify",
            format!("got {:?}", patches.shape()),
        ));
    }
    let mut image = Image::filled(config.image_height, config.image_width, c, T::zero());
    for gy in 0..n_h {
        for gx in 0..n_w {
            let patch = patches.row(gy * n_w + gx);
            for py in 0..p {
                let start = image.index(gx * p, gy * p + py, 0);
                image.data_mut()[start..start + p * c]
                    .copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize, patch: usize, channels: usize) -> ModelConfig {
        ModelConfig::square(size, channels, patch, 8, 1, 2, 8, 2)
    }

    fn ramp(size: usize, channels: usize) -> Image {
        let n = size * size * channels;
        Image::from_vec(size, size, channels, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let c = cfg(30, 10, 3);
        let p = patchify(&ramp(30, 3), &c).unwrap();
        assert_eq!(p.shape(), &[9, 300]);
        let c = cfg(224, 16, 3);
        let p = patchify(&ramp(224, 3), &c).unwrap();
        assert_eq!(p.shape()[0], 196);
    }

    #[test]
    fn patch_order_is_row_major() {
        let c = cfg(4, 2, 1);
        let p = patchify(&ramp(4, 1), &c).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn patchify_round_trips() {
        let c = cfg(30, 10, 3);
        let img = ramp(30, 3);
        let back = unpatchify(&patchify(&img, &c).unwrap(), &c).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patchify_rejects_wrong_shape() {
        let c = cfg(30, 10, 3);
        assert!(patchify(&ramp(20, 3), &c).is_err());
    }

    #[test]
    fn bias_invariants() {
        assert!(AttentionBias::new(vec![false, true]).is_err());
        assert!(AttentionBias::new(vec![true, false, false]).is_err());
        let b = AttentionBias::new(vec![true, false, true]).unwrap();
        assert_eq!(b.allowed_tokens(), vec![0, 2]);
    }
}
