//! Strided DDPM ancestral sampling with the epsilon parameterization.
//!
//! For consecutive visited timesteps `t > s` (with `ab_s = 1` after the last
//! step):
//!
//! ```text
//! a     = ab_t / ab_s            (exactly alpha_t when s = t - 1)
//! b     = 1 - a
//! mean  = (x - b / sqrt(1 - ab_t) * eps_hat) / sqrt(a)
//! var   = b * (1 - ab_s) / (1 - ab_t)
//! x_s   = mean + sqrt(var) * z
//! ```
//!
//! The final step adds no noise. Output pixels are clamped to `[-1, 1]`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DiffusionSchedule;
use crate::denoiser::{Conditioning, DenoiserParams};
use crate::error::{Error, Result};
use crate::numerics::{PrngStream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

impl SamplerConfig {
    /// Visited timesteps in decreasing order: `round(i * (T - 1) / (S - 1))`
    /// for `i = S-1, ..., 0`.
    pub fn timesteps(&self, timesteps: usize) -> Result<Vec<usize>> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::InvalidConfig(format!(
                "sampler steps must lie in 1..={timesteps}, got {}",
                self.steps
            )));
        }
        if self.steps == 1 {
            return Ok(vec![timesteps - 1]);
        }
        let span = (timesteps - 1) as f64 / (self.steps - 1) as f64;
        Ok((0..self.steps)
            .rev()
            .map(|i| (i as f64 * span).round() as usize)
            .collect())
    }
}

/// Images generated per batched forward pass in [`sample_many`].
const CHUNK: usize = 32;

/// Draws one image for `cond` using `stream` for the initial noise and every
/// intermediate noise draw.
pub fn sample(
    params: &DenoiserParams<f32>,
    cond: &Conditioning,
    sampler: &SamplerConfig,
    stream: &mut PrngStream,
) -> Result<Vec<f32>> {
    let mut out = sample_chunk(params, std::slice::from_ref(cond), sampler, &mut [stream])?;
    Ok(out.pop().expect("one image"))
}

/// Draws one image per conditioning. Image `i` uses `Sampler` substream `i`
/// of `seed`, so results do not depend on thread count.
pub fn sample_many(
    params: &DenoiserParams<f32>,
    conds: &[Conditioning],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let base = PrngStream::new(seed, StreamId::Sampler);
    let chunks: Vec<Vec<Vec<f32>>> = conds
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut streams: Vec<PrngStream> = (0..chunk.len())
                .map(|i| base.substream((c * CHUNK + i) as u64))
                .collect();
            let mut refs: Vec<&mut PrngStream> = streams.iter_mut().collect();
            sample_chunk(params, chunk, sampler, &mut refs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn sample_chunk(
    params: &DenoiserParams<f32>,
    conds: &[Conditioning],
    sampler: &SamplerConfig,
    streams: &mut [&mut PrngStream],
) -> Result<Vec<Vec<f32>>> {
    let config = params.config;
    let schedule = DiffusionSchedule::linear(config.timesteps)?;
    let steps = sampler.timesteps(config.timesteps)?;
    let (n, dim) = (conds.len(), config.image_dim);

    let mut cond = Array2::<f32>::zeros((n, config.cond_dim));
    for (mut row, c) in cond.rows_mut().into_iter().zip(conds) {
        if c.pooled.len() != config.cond_dim {
            return Err(Error::ShapeError(format!(
                "conditioning has {} entries, model expects {}",
                c.pooled.len(),
                config.cond_dim
            )));
        }
        row.iter_mut().zip(&c.pooled).for_each(|(d, &v)| *d = v as f32);
    }

    let mut x: Vec<Vec<f64>> = streams
        .iter_mut()
        .map(|s| (0..dim).map(|_| s.gaussian()).collect())
        .collect();
    let mut x_in = Array2::<f32>::zeros((n, dim));

    for (k, &t) in steps.iter().enumerate() {
        let prev = steps.get(k + 1).copied();
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = prev.map_or(1.0, |s| schedule.alpha_bar(s));
        let adjacent = match prev {
            Some(s) => s + 1 == t,
            None => t == 0,
        };
        let (alpha, beta) = if adjacent {
            (schedule.alpha(t), schedule.beta(t))
        } else {
            let a = ab_t / ab_prev;
            (a, 1.0 - a)
        };
        let eps_coef = beta / (1.0 - ab_t).sqrt();
        let sqrt_alpha = alpha.sqrt();
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();

        for (mut row, xi) in x_in.rows_mut().into_iter().zip(&x) {
            row.iter_mut().zip(xi).for_each(|(d, &v)| *d = v as f32);
        }
        let eps_hat = params.forward_batch(&x_in, &vec![t; n], &cond)?;

        for ((xi, e), stream) in x.iter_mut().zip(eps_hat.rows()).zip(streams.iter_mut()) {
            for (v, &e) in xi.iter_mut().zip(e.iter()) {
                *v = (*v - eps_coef * e as f64) / sqrt_alpha;
            }
            if prev.is_some() {
                for v in xi.iter_mut() {
                    *v += sigma * stream.gaussian();
                }
            }
        }
    }
    Ok(x.into_iter()
        .map(|xi| xi.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, OutputParam};

    fn model(seed: u64) -> DenoiserParams<f32> {
        let config = DenoiserConfig {
            image_dim: 16,
            cond_dim: 4,
            hidden: 16,
            timesteps: 100,
            output: OutputParam::default(),
        };
        DenoiserParams::init(config, &mut PrngStream::new(seed, StreamId::Init))
    }

    fn cond() -> Conditioning {
        Conditioning {
            pooled: vec![0.3, -0.2, 0.5, 0.1],
        }
    }

    #[test]
    fn stride_schedule() {
        let s = SamplerConfig { steps: 50 }.timesteps(100).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s[0], 99);
        assert_eq!(*s.last().unwrap(), 0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let full = SamplerConfig { steps: 100 }.timesteps(100).unwrap();
        assert_eq!(full, (0..100).rev().collect::<Vec<_>>());
        assert_eq!(SamplerConfig { steps: 1 }.timesteps(100).unwrap(), vec![99]);
        assert!(SamplerConfig { steps: 0 }.timesteps(100).is_err());
        assert!(SamplerConfig { steps: 101 }.timesteps(100).is_err());
    }

    /// Textbook full-length ancestral chain.
    fn full_chain_oracle(params: &DenoiserParams<f32>, c: &Conditioning, stream: &mut PrngStream) -> Vec<f32> {
        let sched = DiffusionSchedule::linear(100).unwrap();
        let mut x: Vec<f64> = (0..16).map(|_| stream.gaussian()).collect();
        for t in (0..100).rev() {
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let eps = params.forward(&xf, t, c).unwrap();
            let (a, b, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
            for (v, e) in x.iter_mut().zip(&eps) {
                *v = (*v - b / (1.0 - ab).sqrt() * *e as f64) / a.sqrt();
            }
            if t > 0 {
                let var = b * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab);
                for v in x.iter_mut() {
                    *v += var.sqrt() * stream.gaussian();
                }
            }
        }
        x.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
    }

    #[test]
    fn unit_stride_equals_full_chain() {
        let p = model(1);
        let got = sample(
            &p,
            &cond(),
            &SamplerConfig { steps: 100 },
            &mut PrngStream::new(4, StreamId::Sampler),
        )
        .unwrap();
        let want = full_chain_oracle(&p, &cond(), &mut PrngStream::new(4, StreamId::Sampler));
        assert_eq!(got, want);
    }

    #[test]
    fn same_seed_same_sample() {
        let p = model(2);
        let a = sample(
            &p,
            &cond(),
            &SamplerConfig::default(),
            &mut PrngStream::new(5, StreamId::Sampler),
        )
        .unwrap();
        let b = sample(
            &p,
            &cond(),
            &SamplerConfig::default(),
            &mut PrngStream::new(5, StreamId::Sampler),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sample_many_is_deterministic_and_per_image_seeded() {
        let p = model(3);
        let conds = vec![cond(); 40];
        let a = sample_many(&p, &conds, &SamplerConfig::default(), 8).unwrap();
        let b = sample_many(&p, &conds, &SamplerConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn wrong_conditioning_width() {
        let p = model(4);
        let bad = Conditioning { pooled: vec![0.0; 3] };
        assert!(matches!(
            sample(
                &p,
                &bad,
                &SamplerConfig::default(),
                &mut PrngStream::new(1, StreamId::Sampler)
            ),
            Err(Error::ShapeError(_))
        ));
    }
}
