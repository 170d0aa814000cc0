//! Seeded inputs for the benchmarks in `benches/`.

use ndarray::Array2;

use fpan_core::denoiser::{Batch, DenoiserConfig, DenoiserParams, OutputParam};
use fpan_core::embeddings::TokenEmbeddingSequence;
use fpan_core::numerics::{PrngStream, StreamId};

/// `n` unit-norm Gaussian feature vectors of length `dim`.
pub fn unit_features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = PrngStream::new(seed, StreamId::DataGen);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| s.gaussian()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// A symmetric positive-definite `dim x dim` matrix `G G^T / dim + I`.
pub fn spd_matrix(dim: usize, seed: u64) -> Array2<f64> {
    let mut s = PrngStream::new(seed, StreamId::DataGen);
    let g = Array2::from_shape_simple_fn((dim, dim), || s.gaussian());
    g.dot(&g.t()) / dim as f64 + Array2::<f64>::eye(dim)
}

/// The default-sized denoiser for 16x16 images and 16-dimensional
/// conditioning.
pub fn denoiser(seed: u64) -> DenoiserParams<f32> {
    let config = DenoiserConfig {
        image_dim: 256,
        cond_dim: 16,
        hidden: DenoiserConfig::DEFAULT_HIDDEN,
        timesteps: 100,
        output: OutputParam::CleanImage,
    };
    DenoiserParams::init(config, &mut PrngStream::new(seed, StreamId::Init))
}

/// A random minibatch shaped for `params`.
pub fn batch(params: &DenoiserParams<f32>, size: usize, seed: u64) -> Batch<f32> {
    let c = params.config;
    let mut s = PrngStream::new(seed, StreamId::DiffusionNoise);
    let mut gauss = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || s.gaussian() as f32);
    let x_t = gauss(size, c.image_dim);
    let cond = gauss(size, c.cond_dim);
    let eps = gauss(size, c.image_dim);
    let t = (0..size)
        .map(|i| i * (c.timesteps - 1) / size.max(2).saturating_sub(1).max(1))
        .collect();
    Batch { x_t, t, cond, eps }
}

/// An 8-token, 16-dimensional embedding sequence with a 5-token caption.
pub fn token_sequence(seed: u64) -> TokenEmbeddingSequence {
    let mut s = PrngStream::new(seed, StreamId::DataGen);
    TokenEmbeddingSequence::new(Array2::from_shape_simple_fn((8, 16), || s.gaussian()), 5).expect("valid shape")
}
