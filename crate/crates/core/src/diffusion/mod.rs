//! Forward corruption, noise-policy training, and ancestral sampling.

mod sampler;
mod train;

pub use sampler::{sample, sample_many, SamplerConfig};
pub use train::{train_fpan, train_from, train_split, write_loss_trace, TrainConfig, TrainOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::PrngStream;

/// Linear variance schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub const DEFAULT_TIMESTEPS: usize = 100;
    const BETA_START: f64 = 1e-4;
    const BETA_END: f64 = 0.02;
    /// Step count the endpoint betas are quoted for.
    const REFERENCE_TIMESTEPS: f64 = 1000.0;

    /// Linear betas from `1e-4` to `0.02`, rescaled by `1000 / timesteps` so
    /// the total corruption matches a 1000-step chain.
    pub fn linear(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 timesteps, got {timesteps}"
            )));
        }
        let scale = Self::REFERENCE_TIMESTEPS / timesteps as f64;
        let betas = (0..timesteps)
            .map(|t| {
                let frac = t as f64 / (timesteps - 1) as f64;
                scale * (Self::BETA_START + (Self::BETA_END - Self::BETA_START) * frac)
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, checking they are increasing,
    /// inside `(0, 1)`, and end with nearly all signal destroyed.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("betas must be strictly increasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if alpha_bars[0] <= 0.99 {
            return Err(Error::InvalidConfig(format!(
                "first cumulative alpha {} must exceed 0.99",
                alpha_bars[0]
            )));
        }
        let last = *alpha_bars.last().expect("nonempty");
        if last >= 0.05 {
            return Err(Error::InvalidConfig(format!(
                "final cumulative alpha {last} must be below 0.05"
            )));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::BadTimestep {
                t,
                timesteps: self.timesteps(),
            });
        }
        Ok(())
    }
}

/// Corrupts `x0` to timestep `t`: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
/// Returns `(x_t, eps)`.
pub fn forward_noise(
    x0: &[f32],
    t: usize,
    stream: &mut PrngStream,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f32>, Vec<f32>)> {
    schedule.check(t)?;
    let signal = schedule.alpha_bar(t).sqrt();
    let noise = (1.0 - schedule.alpha_bar(t)).sqrt();
    let eps: Vec<f64> = (0..x0.len()).map(|_| stream.gaussian()).collect();
    let x_t = x0
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| (signal * x as f64 + noise * e) as f32)
        .collect();
    Ok((x_t, eps.into_iter().map(|e| e as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stats::{ks_two_sample, mean_and_variance};
    use crate::numerics::StreamId;

    #[test]
    fn default_schedule_invariants() {
        let s = DiffusionSchedule::linear(100).unwrap();
        assert_eq!(s.timesteps(), 100);
        assert!((s.beta(0) - 1e-3).abs() < 1e-15);
        assert!((s.beta(99) - 0.2).abs() < 1e-15);
        assert!(s.alpha_bar(0) > 0.99);
        assert!(s.alpha_bar(99) < 0.05);
        assert!((1..100).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        let long = DiffusionSchedule::linear(1000).unwrap();
        assert!((long.beta(0) - 1e-4).abs() < 1e-15);
        assert!((long.beta(999) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn too_short_schedules_are_rejected() {
        assert!(DiffusionSchedule::linear(1).is_err());
        // beta_end = 0.02 * 1000 / 20 = 1.0 is not a valid variance.
        assert!(DiffusionSchedule::linear(20).is_err());
        assert!(DiffusionSchedule::from_betas(vec![1e-4, 1e-4]).is_err());
    }

    #[test]
    fn bad_timestep() {
        let s = DiffusionSchedule::linear(100).unwrap();
        let mut r = PrngStream::new(0, StreamId::DiffusionNoise);
        assert!(matches!(
            forward_noise(&[0.0; 4], 100, &mut r, &s),
            Err(Error::BadTimestep { t: 100, timesteps: 100 })
        ));
    }

    fn test_image(n: usize) -> Vec<f32> {
        (0..n).map(|i| ((i as f32) * 0.37).sin() * 0.9).collect()
    }

    #[test]
    fn near_identity_at_first_step() {
        let s = DiffusionSchedule::linear(100).unwrap();
        let mut r = PrngStream::new(1, StreamId::DiffusionNoise);
        let x0 = test_image(256);
        let norm0 = x0.iter().map(|v| v * v).sum::<f32>().sqrt();
        let trials = 200;
        let mean_rel: f32 = (0..trials)
            .map(|_| {
                let (xt, _) = forward_noise(&x0, 0, &mut r, &s).unwrap();
                let d: f32 = xt.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum();
                d.sqrt() / norm0
            })
            .sum::<f32>()
            / trials as f32;
        assert!(mean_rel < 0.15, "{mean_rel}");
    }

    #[test]
    fn last_step_is_uncorrelated_with_signal() {
        let s = DiffusionSchedule::linear(100).unwrap();
        let mut data = PrngStream::new(2, StreamId::DataGen);
        let mut r = PrngStream::new(2, StreamId::DiffusionNoise);
        let n = 10_000;
        let x0: Vec<f32> = (0..n).map(|_| (data.uniform() * 2.0 - 1.0) as f32).collect();
        let xt: Vec<f32> = x0
            .iter()
            .map(|&x| forward_noise(&[x], 99, &mut r, &s).unwrap().0[0])
            .collect();
        let a: Vec<f64> = x0.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = xt.iter().map(|&v| v as f64).collect();
        let (ma, va) = mean_and_variance(&a);
        let (mb, vb) = mean_and_variance(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn marginal_variance_matches_closed_form() {
        let s = DiffusionSchedule::linear(100).unwrap();
        let mut data = PrngStream::new(3, StreamId::DataGen);
        let mut r = PrngStream::new(3, StreamId::DiffusionNoise);
        for t in [5, 40, 90] {
            let n = 50_000;
            let x0: Vec<f32> = (0..n).map(|_| (data.uniform() * 2.0 - 1.0) as f32).collect();
            let (_, var0) = mean_and_variance(&x0.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let (xt, _) = forward_noise(&x0, t, &mut r, &s).unwrap();
            let (_, var) = mean_and_variance(&xt.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let expected = s.alpha_bar(t) * var0 + 1.0 - s.alpha_bar(t);
            assert!((var / expected - 1.0).abs() < 0.02, "t={t}: {var} vs {expected}");
        }
    }

    #[test]
    fn one_shot_matches_composed_single_steps() {
        let s = DiffusionSchedule::linear(100).unwrap();
        let mut r = PrngStream::new(4, StreamId::DiffusionNoise);
        let mut chain = PrngStream::new(5, StreamId::DiffusionNoise);
        let x0 = 0.6f64;
        for t in [3, 30, 80] {
            let n = 10_000;
            let direct: Vec<f64> = (0..n)
                .map(|_| forward_noise(&[x0 as f32], t, &mut r, &s).unwrap().0[0] as f64)
                .collect();
            let composed: Vec<f64> = (0..n)
                .map(|_| {
                    let mut x = x0;
                    for k in 0..=t {
                        x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * chain.gaussian();
                    }
                    x
                })
                .collect();
            let ks = ks_two_sample(&direct, &composed, 0.001);
            assert!(!ks.rejects(), "t={t}: D={} crit={}", ks.statistic, ks.critical);
        }
    }
}
