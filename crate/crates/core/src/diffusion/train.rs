use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{forward_noise, DiffusionSchedule};
use crate::dataset::Dataset;
use crate::denoiser::{AdamW, Batch, DenoiserConfig, DenoiserParams, LrSchedule, OutputParam};
use crate::embeddings::{apply_policy_traced, NoisePolicy, PolicyOptions};
use crate::error::{Error, Result};
use crate::numerics::{PrngStream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of `iters` spent on linear learning-rate warm-up.
    pub warmup_fraction: f64,
    pub timesteps: usize,
    pub hidden: usize,
    pub noise_on_padding: bool,
    pub output: OutputParam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            lr: 1e-3,
            batch_size: 16,
            warmup_fraction: 0.05,
            timesteps: DiffusionSchedule::DEFAULT_TIMESTEPS,
            hidden: DenoiserConfig::DEFAULT_HIDDEN,
            noise_on_padding: true,
            output: OutputParam::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iters == 0 {
            return bad("iters must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DenoiserParams<f32>,
    /// Minibatch loss at every iteration.
    pub loss_trace: Vec<f32>,
}

/// Trains a fresh denoiser on the dataset's training split, perturbing every
/// caption's token embeddings with `policy` each time it is drawn.
///
/// Streams, all keyed by `seed`: `Init` for weights, `DataGen` substream 3 for
/// epoch shuffling, `PolicyNoise` for the policy, and `DiffusionNoise` for
/// per-sample timesteps (uniform on `0..T`) and target noise.
pub fn train_fpan(dataset: &Dataset, policy: &NoisePolicy, config: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    train_split(dataset, false, policy, config, seed)
}

/// As [`train_fpan`] but on the holdout split when `holdout` is set; used for
/// the reference model behind the overfitting threshold.
pub fn train_split(
    dataset: &Dataset,
    holdout: bool,
    policy: &NoisePolicy,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    train_from(dataset, holdout, policy, config, seed, None)
}

/// As [`train_split`], continuing from `init` instead of fresh weights when
/// given. The `Init` stream is then unused.
pub fn train_from(
    dataset: &Dataset,
    holdout: bool,
    policy: &NoisePolicy,
    config: &TrainConfig,
    seed: u64,
    init: Option<DenoiserParams<f32>>,
) -> Result<TrainOutput> {
    config.validate()?;
    policy.validate()?;
    let samples: Vec<_> = dataset.samples.iter().filter(|s| s.holdout == holdout).collect();
    if samples.is_empty() {
        return Err(Error::InvalidDataset("no samples in the requested split".into()));
    }
    let schedule = DiffusionSchedule::linear(config.timesteps)?;
    let clean = samples.iter().map(|s| dataset.encode(s)).collect::<Result<Vec<_>>>()?;
    let image_dim = samples[0].image.len();
    let cond_dim = clean[0].dim();
    let model_config = DenoiserConfig {
        image_dim,
        cond_dim,
        hidden: config.hidden,
        timesteps: config.timesteps,
        output: config.output,
    };

    let mut params = match init {
        Some(p) if p.config != model_config => {
            return Err(Error::InvalidConfig(format!(
                "initial weights have configuration {:?}, training needs {model_config:?}",
                p.config
            )))
        }
        Some(p) => p,
        None => DenoiserParams::<f32>::init(model_config, &mut PrngStream::new(seed, StreamId::Init)),
    };
    let mut opt = AdamW::new(&params);
    let lr = LrSchedule::with_warmup_fraction(config.lr, config.iters, config.warmup_fraction);
    let mut order_stream = PrngStream::new(seed, StreamId::DataGen).substream(3);
    let mut policy_stream = PrngStream::new(seed, StreamId::PolicyNoise);
    let mut noise_stream = PrngStream::new(seed, StreamId::DiffusionNoise);
    let opts = PolicyOptions {
        noise_on_padding: config.noise_on_padding,
    };

    let b = config.batch_size;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut loss_trace = Vec::with_capacity(config.iters);

    for iter in 0..config.iters {
        let mut batch = Batch {
            x_t: Array2::<f32>::zeros((b, image_dim)),
            t: Vec::with_capacity(b),
            cond: Array2::<f32>::zeros((b, cond_dim)),
            eps: Array2::<f32>::zeros((b, image_dim)),
        };
        for row in 0..b {
            if cursor == order.len() {
                order_stream.shuffle(&mut order);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;

            let noisy = apply_policy_traced(&clean[idx], policy, &mut policy_stream, opts).sequence;
            for (dst, v) in batch.cond.row_mut(row).iter_mut().zip(noisy.mean_pooled()) {
                *dst = v as f32;
            }
            let t = noise_stream.below(config.timesteps);
            let (x_t, eps) = forward_noise(&samples[idx].image, t, &mut noise_stream, &schedule)?;
            batch.t.push(t);
            batch.x_t.row_mut(row).iter_mut().zip(x_t).for_each(|(d, v)| *d = v);
            batch.eps.row_mut(row).iter_mut().zip(eps).for_each(|(d, v)| *d = v);
        }

        let (loss, grads) = params.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iter,
                loss: loss as f64,
            });
        }
        opt.step(&mut params, &grads, lr.at(iter));
        loss_trace.push(loss);
        if (iter + 1) % 5000 == 0 {
            log::debug!("iter {}: loss {loss:.5}", iter + 1);
        }
    }
    Ok(TrainOutput { params, loss_trace })
}

/// Writes `iter,loss` CSV, one row per iteration.
pub fn write_loss_trace<W: Write>(out: W, trace: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "loss"])?;
    for (i, loss) in trace.iter().enumerate() {
        w.write_record([i.to_string(), loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
