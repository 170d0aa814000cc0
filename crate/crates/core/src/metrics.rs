//! Feature extraction, replication score, mean cosine similarity to the
//! training set, and a Gaussian Fréchet distance on extracted features.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::NoisePolicy;
use crate::error::{Error, Result};
use crate::numerics::{quantile_nearest_rank, sym_matrix_sqrt, PrngStream, StreamId};

/// Quantile used by the replication score.
pub const REPLICATION_QUANTILE: f64 = 0.95;
/// Below this many generated images the 95th percentile is a near-maximum.
pub const MIN_GENERATED: usize = 20;
pub const RECOMMENDED_GENERATED: usize = 100;

/// Frozen random projection followed by `tanh` and L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    projection: Array2<f64>,
    seed: u64,
}

impl FeatureExtractor {
    pub const DIM: usize = 32;
    pub const DEFAULT_SEED: u64 = 0x5EED_FEA7;
    /// Projection rows have norm about `GAIN`, so a typical image lands in
    /// the mildly nonlinear range of `tanh`.
    const GAIN: f64 = 1.0;

    pub fn new(seed: u64, image_dim: usize) -> Self {
        let mut stream = PrngStream::new(seed, StreamId::DataGen).substream(2);
        let scale = Self::GAIN / (image_dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((Self::DIM, image_dim), || stream.gaussian() * scale);
        Self { projection, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn extract(&self, image: &[f32]) -> Result<Vec<f64>> {
        if image.len() != self.image_dim() {
            return Err(Error::ShapeError(format!(
                "image has {} pixels, extractor expects {}",
                image.len(),
                self.image_dim()
            )));
        }
        let mut f: Vec<f64> = self
            .projection
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(image).map(|(w, &x)| w * x as f64).sum::<f64>().tanh())
            .collect();
        let norm = dot(&f, &f).sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateFeature);
        }
        f.iter_mut().for_each(|v| *v /= norm);
        Ok(f)
    }
}

pub fn extract_features(images: &[Vec<f32>], fx: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|img| fx.extract(img)).collect()
}

/// Left-to-right dot product. Kept sequential so results are reproducible
/// bit for bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn nonempty(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().ok_or(Error::EmptySet)?.len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeError("feature vectors differ in length".into()));
    }
    Ok(dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub score: f64,
    pub per_image_top1: Vec<f64>,
    /// Index into the training features of each generated image's best match.
    pub argmax_ids: Vec<usize>,
}

/// Top-1 similarity of every generated feature against the training set and
/// its nearest-rank 95th percentile. Ties go to the lowest training index.
pub fn replication_score(gen: &[Vec<f64>], train: &[Vec<f64>]) -> Result<Replication> {
    let dim = nonempty(gen)?;
    if nonempty(train)? != dim {
        return Err(Error::ShapeError(
            "generated and training features differ in length".into(),
        ));
    }
    let (per_image_top1, argmax_ids): (Vec<f64>, Vec<usize>) = gen
        .par_iter()
        .map(|g| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, t) in train.iter().enumerate() {
                let s = dot(g, t);
                if s > best.0 {
                    best = (s, j);
                }
            }
            best
        })
        .unzip();
    let score = quantile_nearest_rank(&per_image_top1, REPLICATION_QUANTILE)?;
    Ok(Replication {
        score,
        per_image_top1,
        argmax_ids,
    })
}

fn sum_vector(features: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; dim];
    for f in features {
        s.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    s
}

/// Mean over generated images of the mean cosine similarity to every training
/// image, computed as `dot(sum(gen), sum(train)) / (n * m)`.
pub fn sim_clip(gen: &[Vec<f64>], train: &[Vec<f64>]) -> Result<f64> {
    let dim = nonempty(gen)?;
    if nonempty(train)? != dim {
        return Err(Error::ShapeError(
            "generated and training features differ in length".into(),
        ));
    }
    let s = dot(&sum_vector(gen, dim), &sum_vector(train, dim));
    Ok(s / (gen.len() as f64 * train.len() as f64))
}

/// Overfitting threshold: [`sim_clip`] of a reference model that never saw
/// the training split.
pub fn tau_threshold(reference_gen: &[Vec<f64>], train: &[Vec<f64>]) -> Result<f64> {
    sim_clip(reference_gen, train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Unbiased (`1 / (n - 1)`) sample covariance.
    pub cov: Array2<f64>,
}

pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    let dim = nonempty(features)?;
    let n = features.len();
    if n < dim + 1 {
        return Err(Error::TooFewSamples {
            needed: dim + 1,
            got: n,
        });
    }
    let mean: Vec<f64> = sum_vector(features, dim).into_iter().map(|s| s / n as f64).collect();
    let mut cov = Array2::<f64>::zeros((dim, dim));
    for f in features {
        for i in 0..dim {
            let di = f[i] - mean[i];
            for j in i..dim {
                cov[[i, j]] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[[i, j]] / (n - 1) as f64;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(GaussianFit { mean, cov })
}

/// Squared Fréchet distance between two Gaussians:
/// `|m1 - m2|^2 + tr(C1 + C2 - 2 sqrt(sqrt(C1) C2 sqrt(C1)))`.
pub fn frechet_from_moments(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.dim() != b.cov.dim() {
        return Err(Error::ShapeError("Gaussian fits differ in dimension".into()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sym_matrix_sqrt(&a.cov)?;
    let inner = root_a.dot(&b.cov).dot(&root_a);
    let inner = (&inner + &inner.t()) * 0.5;
    let cross = sym_matrix_sqrt(&inner)?;
    let trace = a.cov.diag().sum() + b.cov.diag().sum() - 2.0 * cross.diag().sum();
    let d2 = mean_term + trace;
    Ok(if d2 < 0.0 && d2 > -1e-8 { 0.0 } else { d2 })
}

pub fn frechet_proxy(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    frechet_from_moments(&fit_gaussian(gen)?, &fit_gaussian(reference)?)
}

/// One evaluated run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub policy: NoisePolicy,
    pub seed: u64,
    pub n_generated: usize,
    pub replication: f64,
    pub frechet_proxy: f64,
    pub sim_clip: f64,
    pub tau: f64,
}

impl MetricsRecord {
    pub fn overfit_flag(&self) -> bool {
        self.sim_clip > self.tau
    }

    fn row(&self) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id.clone(),
            policy_kind: self.policy.kind().to_string(),
            w: self.policy.w(),
            p: self.policy.p(),
            q: self.policy.q(),
            seed: self.seed,
            n_gen: self.n_generated,
            r: self.replication,
            frechet: self.frechet_proxy,
            sim_clip: self.sim_clip,
            tau: self.tau,
            overfit_flag: self.overfit_flag(),
        }
    }

    fn from_row(row: MetricsRow) -> Result<Self> {
        let kind = row.policy_kind.parse()?;
        Ok(Self {
            run_id: row.run_id,
            policy: NoisePolicy::from_parts(kind, row.w, row.p, row.q)?,
            seed: row.seed,
            n_generated: row.n_gen,
            replication: row.r,
            frechet_proxy: row.frechet,
            sim_clip: row.sim_clip,
            tau: row.tau,
        })
    }
}

pub const CSV_HEADER: &str = "run_id,policy_kind,w,p,q,seed,n_gen,R,frechet,sim_clip,tau,overfit_flag";

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    run_id: String,
    policy_kind: String,
    w: Option<f64>,
    p: Option<f64>,
    q: Option<f64>,
    seed: u64,
    n_gen: usize,
    #[serde(rename = "R")]
    r: f64,
    frechet: f64,
    sim_clip: f64,
    tau: f64,
    overfit_flag: bool,
}

/// Writes records as CSV with [`CSV_HEADER`].
pub fn write_records<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r.row())?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// A single CSV data row (no header, trailing newline).
pub fn record_to_csv_line(record: &MetricsRecord) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(record.row())?;
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidConfig(format!(
            "unexpected results header {:?}",
            header.join(",")
        )));
    }
    r.deserialize::<MetricsRow>()
        .map(|row| MetricsRecord::from_row(row?))
        .collect()
}
