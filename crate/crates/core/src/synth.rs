//! Synthetic test images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::vit::Image;

/// Peak-to-peak pixel jitter around an image's base colour.
pub const JITTER: f64 = 0.15;

/// A flat random colour plus uniform per-pixel jitter, clamped to `[0, 1]`.
pub fn structured_image<T: Scalar>(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    channels: usize,
) -> Image<T> {
    let base: Vec<f64> = (0..channels).map(|_| rng.random()).collect();
    let data = (0..width * height * channels)
        .map(|i| {
            let v = base[i % channels] + JITTER * (rng.random::<f64>() - 0.5);
            T::lit(v.clamp(0.0, 1.0))
        })
        .collect();
    Image::from_vec(height, width, channels, data).expect("shape is consistent")
}

/// `count` structured images; image `i` comes from ChaCha8 stream `i` of
/// `seed`.
pub fn structured_images<T: Scalar>(
    width: usize,
    height: usize,
    channels: usize,
    count: usize,
    seed: u64,
) -> Vec<Image<T>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            structured_image(&mut rng, width, height, channels)
        })
        .collect()
}

/// Independent uniform pixels in `[0, 1)`.
pub fn uniform_image<T: Scalar>(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    channels: usize,
) -> Image<T> {
    let data = (0..width * height * channels)
        .map(|_| T::lit(rng.random::<f64>()))
        .collect();
    Image::from_vec(height, width, channels, data).expect("shape is consistent")
}
