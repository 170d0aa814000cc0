//! Closed-form token-entry moments under each noise policy, and a Monte-Carlo
//! harness that checks them.
//!
//! For input entries with mean `mu` and variance `s2`:
//!
//! | policy      | mean           | variance                          |
//! |-------------|----------------|-----------------------------------|
//! | none        | `mu`           | `s2`                              |
//! | gn(W)       | `mu`           | `s2 + W^2`                        |
//! | fpan(W, P)  | `mu`           | `s2 + P W^2`                      |
//! | cpan(W, P)  | `mu`           | `s2 + P W^2`                      |
//! | rm(Q)       | `(1 - Q) mu`   | `(1 - Q) s2 + Q (1 - Q) mu^2`     |

use std::io::Write;

use serde::Serialize;

use crate::embeddings::{apply_policy_traced, NoisePolicy, PolicyOptions, TokenEmbeddingSequence};
use crate::error::{Error, Result};
use crate::numerics::PrngStream;

/// Entry moments of a CLIP text-encoder token population, kept as a fixed
/// reference point for the closed forms: `(mean, std)`.
pub const REFERENCE_POPULATION: (f64, f64) = (-0.1674, 1.0306);

pub const MIN_SAMPLES: usize = 100_000;
/// Relative tolerance on the output standard deviation.
pub const STD_TOLERANCE: f64 = 0.02;
/// Width of the mean band in standard errors.
pub const MEAN_BAND_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

pub fn predict_moments(policy: &NoisePolicy, mean: f64, std: f64) -> Moments {
    let var = std * std;
    match *policy {
        NoisePolicy::None => Moments { mean, std },
        NoisePolicy::Gn { w } => Moments {
            mean,
            std: (var + w * w).sqrt(),
        },
        NoisePolicy::Fpan { w, p } | NoisePolicy::Cpan { w, p } => Moments {
            mean,
            std: (var + p * w * w).sqrt(),
        },
        NoisePolicy::Rm { q } => Moments {
            mean: (1.0 - q) * mean,
            std: ((1.0 - q) * var + q * (1.0 - q) * mean * mean).sqrt(),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub policy: NoisePolicy,
    pub n_samples: usize,
    pub input_mean: f64,
    pub input_std: f64,
    pub output_mean: f64,
    pub output_std: f64,
    pub predicted_mean: f64,
    pub predicted_std: f64,
    pub rel_err_mean: f64,
    pub rel_err_std: f64,
    /// Half-width of the acceptance band around the predicted mean.
    pub mean_band: f64,
}

impl DistributionReport {
    pub fn mean_ok(&self) -> bool {
        (self.output_mean - self.predicted_mean).abs() <= self.mean_band
    }

    pub fn std_ok(&self) -> bool {
        self.rel_err_std <= STD_TOLERANCE
    }

    pub fn passes(&self) -> bool {
        self.mean_ok() && self.std_ok()
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Draws whole sequences from `population` (uniformly, with replacement)
/// until at least `n` entries are collected, applies `policy` to each, and
/// compares the pooled output moments with [`predict_moments`] evaluated at
/// the pooled moments of the drawn clean entries.
///
/// The mean band is `4` cluster standard errors, one cluster per drawn
/// sequence, since gates and masks are shared within a token or sequence.
pub fn empirical_report(
    policy: &NoisePolicy,
    population: &[TokenEmbeddingSequence],
    stream: &mut PrngStream,
    n: usize,
    opts: PolicyOptions,
) -> Result<DistributionReport> {
    policy.validate()?;
    let population_entries: usize = population.iter().map(|s| s.tokens().len()).sum();
    if population.is_empty() || n < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: n.min(population_entries),
        });
    }
    let mean_factor = match policy {
        NoisePolicy::Rm { q } => 1.0 - q,
        _ => 1.0,
    };

    let (mut count, mut in_sum, mut in_sq, mut out_sum, mut out_sq) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut cluster_residuals = Vec::new();
    while count < n {
        let seq = &population[stream.below(population.len())];
        let noisy = apply_policy_traced(seq, policy, stream, opts).sequence;
        let mut residual = 0.0;
        for (&x, &y) in seq.tokens().iter().zip(noisy.tokens().iter()) {
            in_sum += x;
            in_sq += x * x;
            out_sum += y;
            out_sq += y * y;
            residual += y - mean_factor * x;
        }
        count += seq.tokens().len();
        cluster_residuals.push(residual);
    }

    let nf = count as f64;
    let input_mean = in_sum / nf;
    let input_std = (in_sq / nf - input_mean * input_mean).max(0.0).sqrt();
    let output_mean = out_sum / nf;
    let output_std = (out_sq / nf - output_mean * output_mean).max(0.0).sqrt();
    let predicted = predict_moments(policy, input_mean, input_std);
    let se = cluster_residuals.iter().map(|r| r * r).sum::<f64>().sqrt() / nf;

    Ok(DistributionReport {
        policy: *policy,
        n_samples: count,
        input_mean,
        input_std,
        output_mean,
        output_std,
        predicted_mean: predicted.mean,
        predicted_std: predicted.std,
        rel_err_mean: rel_err(output_mean, predicted.mean),
        rel_err_std: rel_err(output_std, predicted.std),
        mean_band: MEAN_BAND_SIGMAS * se,
    })
}

/// One row per embedding dimension: `(dimension, empirical, predicted)`.
pub fn per_dimension_moments(
    policy: &NoisePolicy,
    population: &[TokenEmbeddingSequence],
    stream: &mut PrngStream,
    n_sequences: usize,
    opts: PolicyOptions,
) -> Result<Vec<(usize, Moments, Moments)>> {
    let dim = population.first().ok_or(Error::EmptySet)?.dim();
    let mut stats = vec![[0.0f64; 4]; dim];
    let mut rows = 0usize;
    for _ in 0..n_sequences {
        let seq = &population[stream.below(population.len())];
        let noisy = apply_policy_traced(seq, policy, stream, opts).sequence;
        for (clean, out) in seq.tokens().rows().into_iter().zip(noisy.tokens().rows()) {
            for (j, s) in stats.iter_mut().enumerate() {
                s[0] += clean[j];
                s[1] += clean[j] * clean[j];
                s[2] += out[j];
                s[3] += out[j] * out[j];
            }
            rows += 1;
        }
    }
    let nf = rows as f64;
    Ok(stats
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let (m_in, m_out) = (s[0] / nf, s[2] / nf);
            let sd_in = (s[1] / nf - m_in * m_in).max(0.0).sqrt();
            let sd_out = (s[3] / nf - m_out * m_out).max(0.0).sqrt();
            (
                j,
                Moments {
                    mean: m_out,
                    std: sd_out,
                },
                predict_moments(policy, m_in, sd_in),
            )
        })
        .collect())
}

#[derive(Serialize)]
struct ReportRow<'a> {
    policy_kind: &'a str,
    w: Option<f64>,
    p: Option<f64>,
    q: Option<f64>,
    n_samples: usize,
    input_mean: f64,
    input_std: f64,
    output_mean: f64,
    output_std: f64,
    predicted_mean: f64,
    predicted_std: f64,
    rel_err_mean: f64,
    rel_err_std: f64,
    mean_band: f64,
    pass: bool,
}

pub fn write_reports<W: Write>(out: W, reports: &[DistributionReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        let kind = r.policy.kind();
        w.serialize(ReportRow {
            policy_kind: kind.as_str(),
            w: r.policy.w(),
            p: r.policy.p(),
            q: r.policy.q(),
            n_samples: r.n_samples,
            input_mean: r.input_mean,
            input_std: r.input_std,
            output_mean: r.output_mean,
            output_std: r.output_std,
            predicted_mean: r.predicted_mean,
            predicted_std: r.predicted_std,
            rel_err_mean: r.rel_err_mean,
            rel_err_std: r.rel_err_std,
            mean_band: r.mean_band,
            pass: r.passes(),
        })?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
