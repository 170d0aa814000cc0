//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream. The 256-bit key is the first four
//! outputs of SplitMix64 started at `seed`, written little-endian. The 64-bit
//! ChaCha stream word is `(stream_id << 56) | substream`, so streams with the
//! same seed but different ids (or substream indices) read disjoint,
//! independent keystreams. ChaCha output is fully specified, so a given
//! `(seed, stream_id, substream)` produces the same draws on every platform.
//!
//! Uniforms are `(next_u64 >> 11) * 2^-53` in `[0, 1)`. Gaussians use the
//! Box–Muller transform on `(1 - u1, u2)`, caching the sine branch for the
//! next call.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which consumer a stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    DataGen = 1,
    Init = 2,
    DiffusionNoise = 3,
    PolicyNoise = 4,
    Sampler = 5,
}

const SUBSTREAM_BITS: u32 = 56;

/// SplitMix64 step; also used as a general 64-bit mixer.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label.
pub fn mix_seed(seed: u64, label: u64) -> u64 {
    let mut s = seed ^ label.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut s)
}

#[derive(Clone)]
pub struct PrngStream {
    rng: ChaCha8Rng,
    seed: u64,
    id: StreamId,
    substream: u64,
    spare_gaussian: Option<f64>,
}

impl std::fmt::Debug for PrngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrngStream")
            .field("seed", &self.seed)
            .field("id", &self.id)
            .field("substream", &self.substream)
            .finish()
    }
}

impl PrngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self::with_substream(seed, id, 0)
    }

    fn with_substream(seed: u64, id: StreamId, substream: u64) -> Self {
        assert!(
            substream < (1 << SUBSTREAM_BITS),
            "substream index {substream} exceeds 56 bits"
        );
        let mut state = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(((id as u64) << SUBSTREAM_BITS) | substream);
        Self {
            rng,
            seed,
            id,
            substream,
            spare_gaussian: None,
        }
    }

    /// A fresh stream keyed by the same seed and id but a different
    /// substream index. Independent of the parent's position.
    pub fn substream(&self, index: u64) -> Self {
        Self::with_substream(self.seed, self.id, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `true` with probability `p`. `p <= 0` never fires, `p >= 1` always does.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    /// Fisher–Yates shuffle driven by [`below`](Self::below).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` i.i.d. standard normal draws from `stream`.
pub fn draw_gaussian(stream: &mut PrngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| stream.gaussian()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stats::{chi_square_uniform, mean_and_variance};

    #[test]
    fn gaussian_moments() {
        let mut s = PrngStream::new(11, StreamId::DiffusionNoise);
        let xs = draw_gaussian(&mut s, 1_000_000);
        let (mean, var) = mean_and_variance(&xs);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn same_seed_and_stream_is_bit_identical() {
        let a = draw_gaussian(&mut PrngStream::new(42, StreamId::Sampler), 1000);
        let b = draw_gaussian(&mut PrngStream::new(42, StreamId::Sampler), 1000);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn known_first_words_are_stable() {
        // Frozen so a dependency bump that changes the keystream is caught.
        let mut s = PrngStream::new(0, StreamId::DataGen);
        assert_eq!(s.next_u64(), 0xfb67e1e1f10cb4d7);
        assert_eq!(s.next_u64(), 0x0bf217dcc21dbde5);
        let mut g = PrngStream::new(7, StreamId::Sampler);
        assert_eq!(g.gaussian(), -0.8825784505403106);
        assert_eq!(g.gaussian(), -0.8642420648777861);
    }

    #[test]
    fn streams_differ_by_id_and_substream() {
        let a = PrngStream::new(5, StreamId::Init).next_u64();
        let b = PrngStream::new(5, StreamId::PolicyNoise).next_u64();
        let base = PrngStream::new(5, StreamId::Init);
        let c = base.substream(1).clone().next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let xs = draw_gaussian(&mut PrngStream::new(9, StreamId::Init), n);
        let ys = draw_gaussian(&mut PrngStream::new(9, StreamId::PolicyNoise), n);
        let corr: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // 4 sigma for a product of independent unit normals.
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn every_stream_passes_chi_square_uniformity() {
        let ids = [
            StreamId::DataGen,
            StreamId::Init,
            StreamId::DiffusionNoise,
            StreamId::PolicyNoise,
            StreamId::Sampler,
        ];
        for id in ids {
            let mut s = PrngStream::new(2024, id);
            let mut counts = vec![0u64; 100];
            for _ in 0..100_000 {
                counts[(s.uniform() * 100.0) as usize] += 1;
            }
            let p = chi_square_uniform(&counts).p_value;
            assert!(p > 0.001, "{id:?}: p = {p}");
        }
    }

    #[test]
    fn bernoulli_edges() {
        let mut s = PrngStream::new(1, StreamId::PolicyNoise);
        assert!((0..1000).all(|_| !s.bernoulli(0.0)));
        assert!((0..1000).all(|_| s.bernoulli(1.0)));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut s = PrngStream::new(3, StreamId::DataGen);
        let mut v: Vec<usize> = (0..50).collect();
        s.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
