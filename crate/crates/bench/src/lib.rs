//! Shared fixtures for the criterion benchmarks.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sslseg_core::raster::LabelMask;

pub fn random_points(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, dim), |_| rng.gen_range(-2.0..2.0))
}

pub fn random_mask(width: usize, height: usize, classes: u8, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..width * height)
        .map(|_| rng.gen_range(1..=classes))
        .collect();
    LabelMask::new(width, height, labels).expect("valid mask")
}
