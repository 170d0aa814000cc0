//! Studies over noise-policy grids: train, sample, evaluate, and summarize.
//!
//! A study writes into its output directory:
//!
//! - `study.json`: the configuration and its hash,
//! - `reference.json`: the overfitting threshold and the reference run's metrics,
//! - `results.csv`: one [`MetricsRecord`] row per (policy, seed), appended as
//!   each run finishes,
//! - `curves.json`: per-family trend fits, trade-off curves, and stage labels,
//! - `study.log`: wall-clock timings (kept out of the results so those stay
//!   byte-identical across reruns),
//! - `rfid-<family>.svg` when plots are enabled.
//!
//! Rerunning with the same configuration skips rows already present.

mod curves;
mod plot;
mod stages;

pub use curves::{
    families, min_distance_to_origin, rfid_curve, trend_curve, CurveFit, Family, RfidCurve, SweepAxis, RFID_DEGREE,
    TREND_DEGREE,
};
pub use plot::rfid_svg;
pub use stages::{classify_stages, StageClassification, StageLabel, StagePoint, StageWarning};

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_dataset, Dataset, Split, IMAGE_DIM};
use crate::denoiser::{Conditioning, DenoiserParams};
use crate::diffusion::{sample_many, train_fpan, train_split, SamplerConfig, TrainConfig};
use crate::embeddings::{NoisePolicy, PolicyKind};
use crate::error::{Error, Result};
use crate::metrics::{
    extract_features, frechet_proxy, read_records, record_to_csv_line, replication_score, sim_clip, tau_threshold,
    FeatureExtractor, MetricsRecord, Replication, CSV_HEADER, MIN_GENERATED, RECOMMENDED_GENERATED,
    REPLICATION_QUANTILE,
};
use crate::numerics::{PolyFit, PrngStream, StreamId};

pub const DEFAULT_W_GRID: [f64; 6] = [0.0, 0.4, 0.8, 1.2, 1.7, 2.2];
pub const DEFAULT_P_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_N_GENERATED: usize = RECOMMENDED_GENERATED;
pub const DEFAULT_REFERENCE_SEED: u64 = 1000;
/// Relative rise of the Fréchet proxy over its post-crossing minimum that
/// marks the start of underfitting.
pub const DEFAULT_STAGE_MARGIN: f64 = 0.2;
/// Gate probabilities at or below this are left out of `p`-sweep trade-off
/// curves.
pub const DEFAULT_CURVE_MIN_P: f64 = 0.2;
/// Environment variable capping how many study cells run at once.
pub const THREADS_ENV: &str = "FPAN_THREADS";

/// `Sampler` substream that orders generation prompts; far above the
/// per-image substreams used by [`sample_many`].
const PROMPT_SUBSTREAM: u64 = 1 << 40;

pub const STUDY_FILE: &str = "study.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const CURVES_FILE: &str = "curves.json";
pub const LOG_FILE: &str = "study.log";

fn default_n_generated() -> usize {
    DEFAULT_N_GENERATED
}

fn default_reference_seed() -> u64 {
    DEFAULT_REFERENCE_SEED
}

fn default_frechet_reference() -> Split {
    Split::Holdout
}

fn default_stage_margin() -> f64 {
    DEFAULT_STAGE_MARGIN
}

fn default_curve_min_p() -> f64 {
    DEFAULT_CURVE_MIN_P
}

/// A grid of training runs over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub policies: Vec<NoisePolicy>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_generated")]
    pub n_generated: usize,
    /// Seed of the model trained on the holdout split to set the
    /// overfitting threshold.
    #[serde(default = "default_reference_seed")]
    pub reference_seed: u64,
    /// Split whose images form the Fréchet reference distribution.
    #[serde(default = "default_frechet_reference")]
    pub frechet_reference: Split,
    #[serde(default = "default_stage_margin")]
    pub stage_margin: f64,
    #[serde(default = "default_curve_min_p")]
    pub curve_min_p: f64,
    #[serde(default)]
    pub plots: bool,
}

impl StudyConfig {
    /// A study with default hyperparameters and the given policy grid.
    pub fn new(dataset: PathBuf, output_dir: PathBuf, policies: Vec<NoisePolicy>, seeds: Vec<u64>) -> Self {
        Self {
            dataset,
            output_dir,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            policies,
            seeds,
            n_generated: DEFAULT_N_GENERATED,
            reference_seed: DEFAULT_REFERENCE_SEED,
            frechet_reference: Split::Holdout,
            stage_margin: DEFAULT_STAGE_MARGIN,
            curve_min_p: DEFAULT_CURVE_MIN_P,
            plots: false,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.policies.is_empty() {
            return bad("policy grid is empty".into());
        }
        for p in &self.policies {
            p.validate()?;
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let ids: Vec<String> = self.cells().map(|(p, s)| run_id(&p, s)).collect();
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return bad("policy grid contains duplicates".into());
        }
        let min_gen = MIN_GENERATED.max(FeatureExtractor::DIM + 1);
        if self.n_generated < min_gen {
            return bad(format!("n_generated must be at least {min_gen}"));
        }
        if self.n_generated < RECOMMENDED_GENERATED {
            log::warn!(
                "n_generated = {} is below {RECOMMENDED_GENERATED}; the 95th percentile of R is coarse",
                self.n_generated
            );
        }
        if !(self.stage_margin >= 0.0 && self.stage_margin.is_finite()) {
            return bad(format!("stage_margin {} must be >= 0", self.stage_margin));
        }
        if !(0.0..=1.0).contains(&self.curve_min_p) {
            return bad(format!("curve_min_p {} must lie in [0, 1]", self.curve_min_p));
        }
        self.train.validate()?;
        self.sampler.timesteps(self.train.timesteps)?;
        Ok(())
    }

    /// Every (policy, seed) cell in grid order: policies outer, seeds inner.
    pub fn cells(&self) -> impl Iterator<Item = (NoisePolicy, u64)> + '_ {
        self.policies
            .iter()
            .flat_map(move |p| self.seeds.iter().map(move |&s| (*p, s)))
    }

    /// SHA-256 over everything that affects result rows, plus the dataset's
    /// content hash. Paths and post-processing settings are excluded.
    pub fn config_hash(&self, dataset_hash: &str) -> Result<String> {
        #[derive(Serialize)]
        struct Hashed<'a> {
            dataset_hash: &'a str,
            train: &'a TrainConfig,
            sampler: &'a SamplerConfig,
            policies: &'a [NoisePolicy],
            seeds: &'a [u64],
            n_generated: usize,
            reference_seed: u64,
            frechet_reference: Split,
        }
        let bytes = serde_json::to_vec(&Hashed {
            dataset_hash,
            train: &self.train,
            sampler: &self.sampler,
            policies: &self.policies,
            seeds: &self.seeds,
            n_generated: self.n_generated,
            reference_seed: self.reference_seed,
            frechet_reference: self.frechet_reference,
        })?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Row identifier: policy kind, its parameters, and the seed, e.g.
/// `fpan-w1.7-p0.6-s2` or `none-s1`.
pub fn run_id(policy: &NoisePolicy, seed: u64) -> String {
    let mut id = policy.kind().to_string();
    for (name, value) in [("w", policy.w()), ("p", policy.p()), ("q", policy.q())] {
        if let Some(v) = value {
            id.push_str(&format!("-{name}{v}"));
        }
    }
    id.push_str(&format!("-s{seed}"));
    id
}

/// Cell cap from [`THREADS_ENV`]; 1 when unset or unparsable.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Conditionings for `n` generations: the training split (duplicates
/// included) in a seeded shuffled order, cycled as needed.
pub fn training_prompts(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<Conditioning>> {
    let mut pool: Vec<_> = dataset.train_samples().collect();
    if pool.is_empty() {
        return Err(Error::InvalidDataset("training split is empty".into()));
    }
    PrngStream::new(seed, StreamId::Sampler)
        .substream(PROMPT_SUBSTREAM)
        .shuffle(&mut pool);
    pool.iter()
        .cycle()
        .take(n)
        .map(|s| Ok(Conditioning::from_sequence(&dataset.encode(s)?)))
        .collect()
}

/// Generates `n` images from the training prompts.
pub fn generate(
    params: &DenoiserParams<f32>,
    dataset: &Dataset,
    n: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let prompts = training_prompts(dataset, n, seed)?;
    sample_many(params, &prompts, sampler, seed)
}

/// Metrics of one generated set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub replication: Replication,
    pub frechet_proxy: f64,
    pub sim_clip: f64,
}

impl Evaluation {
    pub fn record(&self, run_id: String, policy: NoisePolicy, seed: u64, tau: f64) -> MetricsRecord {
        MetricsRecord {
            run_id,
            policy,
            seed,
            n_generated: self.replication.per_image_top1.len(),
            replication: self.replication.score,
            frechet_proxy: self.frechet_proxy,
            sim_clip: self.sim_clip,
            tau,
        }
    }
}

/// How often the most replicated generations point at duplicated groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicateAttribution {
    /// Generations in the top 5% by top-1 similarity.
    pub top_count: usize,
    /// Fraction of those whose nearest training image is duplicated.
    pub hit_rate: f64,
    /// Fraction of unique training groups that are duplicated.
    pub chance: f64,
}

/// Feature caches for one dataset: training images for replication and
/// `sim_clip`, and one split as the Fréchet reference.
#[derive(Debug, Clone)]
pub struct Evaluator {
    fx: FeatureExtractor,
    train_features: Vec<Vec<f64>>,
    train_groups: Vec<u32>,
    reference_features: Vec<Vec<f64>>,
    duplicated: Vec<bool>,
    chance: f64,
}

impl Evaluator {
    pub fn new(dataset: &Dataset, frechet_reference: Split) -> Result<Self> {
        let fx = FeatureExtractor::new(dataset.manifest.feature_seed, IMAGE_DIM);
        let train: Vec<Vec<f32>> = dataset.train_samples().map(|s| s.image.clone()).collect();
        let reference: Vec<Vec<f32>> = dataset
            .split(frechet_reference)
            .into_iter()
            .map(|s| s.image.clone())
            .collect();
        if reference.len() <= FeatureExtractor::DIM {
            return Err(Error::TooFewSamples {
                needed: FeatureExtractor::DIM + 1,
                got: reference.len(),
            });
        }
        let train_groups: Vec<u32> = dataset.train_samples().map(|s| s.group_id).collect();
        let duplicated = train_groups.iter().map(|&g| dataset.is_duplicated_group(g)).collect();
        let m = &dataset.manifest;
        Ok(Self {
            train_features: extract_features(&train, &fx)?,
            reference_features: extract_features(&reference, &fx)?,
            fx,
            train_groups,
            duplicated,
            chance: m.n_duplicated_groups() as f64 / m.n_unique as f64,
        })
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.fx
    }

    pub fn train_features(&self) -> &[Vec<f64>] {
        &self.train_features
    }

    /// Duplicate group of training feature `index`.
    pub fn train_group(&self, index: usize) -> u32 {
        self.train_groups[index]
    }

    pub fn evaluate(&self, images: &[Vec<f32>]) -> Result<Evaluation> {
        let features = extract_features(images, &self.fx)?;
        Ok(Evaluation {
            replication: replication_score(&features, &self.train_features)?,
            frechet_proxy: frechet_proxy(&features, &self.reference_features)?,
            sim_clip: sim_clip(&features, &self.train_features)?,
        })
    }

    /// `sim_clip` of `images` against the training set, used as the
    /// threshold when `images` come from a reference model.
    pub fn tau(&self, images: &[Vec<f32>]) -> Result<f64> {
        tau_threshold(&extract_features(images, &self.fx)?, &self.train_features)
    }

    pub fn duplicate_attribution(&self, replication: &Replication) -> DuplicateAttribution {
        let n = replication.per_image_top1.len();
        let top_count = (((1.0 - REPLICATION_QUANTILE) * n as f64).ceil() as usize).clamp(1, n.max(1));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            replication.per_image_top1[b]
                .total_cmp(&replication.per_image_top1[a])
                .then(a.cmp(&b))
        });
        let hits = order
            .iter()
            .take(top_count)
            .filter(|&&i| self.duplicated[replication.argmax_ids[i]])
            .count();
        DuplicateAttribution {
            top_count,
            hit_rate: if n == 0 { 0.0 } else { hits as f64 / top_count as f64 },
            chance: self.chance,
        }
    }
}

/// The holdout-trained model that sets the overfitting threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRun {
    pub config_hash: String,
    pub seed: u64,
    pub tau: f64,
    pub replication: f64,
    pub frechet_proxy: f64,
}

/// Trains on the holdout split with no policy, generates from the training
/// prompts, and measures `sim_clip` against the training set.
pub fn reference_run(
    dataset: &Dataset,
    evaluator: &Evaluator,
    config: &StudyConfig,
    config_hash: &str,
) -> Result<ReferenceRun> {
    let seed = config.reference_seed;
    let out = train_split(dataset, true, &NoisePolicy::None, &config.train, seed)?;
    let images = generate(&out.params, dataset, config.n_generated, &config.sampler, seed)?;
    let eval = evaluator.evaluate(&images)?;
    Ok(ReferenceRun {
        config_hash: config_hash.to_owned(),
        seed,
        tau: evaluator.tau(&images)?,
        replication: eval.replication.score,
        frechet_proxy: eval.frechet_proxy,
    })
}

/// Trains, generates, and evaluates one grid cell.
pub fn run_cell(
    dataset: &Dataset,
    evaluator: &Evaluator,
    config: &StudyConfig,
    policy: NoisePolicy,
    seed: u64,
    tau: f64,
) -> Result<(MetricsRecord, DuplicateAttribution)> {
    let out = train_fpan(dataset, &policy, &config.train, seed)?;
    let images = generate(&out.params, dataset, config.n_generated, &config.sampler, seed)?;
    let eval = evaluator.evaluate(&images)?;
    let attribution = evaluator.duplicate_attribution(&eval.replication);
    Ok((eval.record(run_id(&policy, seed), policy, seed, tau), attribution))
}

/// Per-value seed means within a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub n_seeds: usize,
    pub replication: f64,
    pub frechet_proxy: f64,
    pub sim_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub labels: Vec<(f64, StageLabel)>,
    /// Noise intensity of the first point at or below the threshold.
    pub crossing_w: Option<f64>,
    pub warning: Option<StageWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: String,
    pub kind: PolicyKind,
    pub axis: SweepAxis,
    pub fixed: Option<f64>,
    pub points: Vec<SweepPoint>,
    /// R against the Fréchet proxy over all seeds (and, for `p` sweeps,
    /// only gate probabilities above `curve_min_p`).
    pub rfid: Option<CurveFit>,
    /// Cubic fits of each metric against the swept value.
    pub trends: BTreeMap<String, CurveFit>,
    pub stages: Option<StageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvesReport {
    pub config_hash: String,
    pub tau: f64,
    pub families: Vec<FamilyReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Seed-averaged metrics at each swept value.
pub fn sweep_points(family: &Family) -> Vec<SweepPoint> {
    family
        .values()
        .into_iter()
        .map(|value| {
            let rows: Vec<&MetricsRecord> = family.at(value).collect();
            SweepPoint {
                value,
                n_seeds: rows.len(),
                replication: mean(rows.iter().map(|r| r.replication)),
                frechet_proxy: mean(rows.iter().map(|r| r.frechet_proxy)),
                sim_clip: mean(rows.iter().map(|r| r.sim_clip)),
            }
        })
        .collect()
}

/// Fits, trends, and stage labels for every family in `records`.
///
/// `p`-sweep trade-off curves use only gate probabilities above
/// `curve_min_p`; stages use `stage_margin` (see [`classify_stages`]).
pub fn summarize(
    records: &[MetricsRecord],
    tau: f64,
    stage_margin: f64,
    curve_min_p: f64,
    config_hash: &str,
) -> Result<CurvesReport> {
    let mut reports = Vec::new();
    for family in families(records) {
        let points = sweep_points(&family);
        let curve_records: Vec<MetricsRecord> = family
            .records
            .iter()
            .filter(|r| family.axis != SweepAxis::P || family.sweep_value(r) > curve_min_p)
            .cloned()
            .collect();
        let rfid = match rfid_curve(&curve_records) {
            Ok(c) => Some(c.to_curve_fit()),
            Err(e) => {
                log::info!("{}: no trade-off curve ({e})", family.label());
                None
            }
        };

        let xs: Vec<f64> = family.records.iter().map(|r| family.sweep_value(r)).collect();
        let mut trends = BTreeMap::new();
        if points.len() > TREND_DEGREE {
            let column = |get: fn(&MetricsRecord) -> f64| family.records.iter().map(get).collect::<Vec<f64>>();
            let metrics = [
                ("R", column(|r| r.replication)),
                ("frechet", column(|r| r.frechet_proxy)),
                ("sim_clip", column(|r| r.sim_clip)),
            ];
            for (name, ys) in metrics {
                match trend_curve(&xs, &ys) {
                    Ok(fit) => {
                        trends.insert(name.to_owned(), CurveFit::from(&fit));
                    }
                    Err(e) => log::info!("{}: no {name} trend ({e})", family.label()),
                }
            }
        }

        let stages = if family.axis == SweepAxis::W {
            let stage_points: Vec<StagePoint> = points
                .iter()
                .map(|p| StagePoint {
                    w: p.value,
                    sim_clip: p.sim_clip,
                    frechet_proxy: p.frechet_proxy,
                })
                .collect();
            let c = classify_stages(&stage_points, tau, stage_margin)?;
            Some(StageReport {
                labels: points.iter().map(|p| p.value).zip(c.labels).collect(),
                crossing_w: c.crossing.map(|i| points[i].value),
                warning: c.warning,
            })
        } else {
            None
        };

        reports.push(FamilyReport {
            family: family.label(),
            kind: family.kind,
            axis: family.axis,
            fixed: family.fixed,
            points,
            rfid,
            trends,
            stages,
        });
    }
    Ok(CurvesReport {
        config_hash: config_hash.to_owned(),
        tau,
        families: reports,
    })
}

/// Writes `rfid-<family>.svg` into `dir` for every family with a fitted
/// trade-off curve.
pub fn write_plots(dir: &Path, records: &[MetricsRecord], curves: &CurvesReport) -> Result<()> {
    let all = families(records);
    for report in &curves.families {
        let Some(fit) = &report.rfid else { continue };
        let Some(family) = all.iter().find(|f| f.label() == report.family) else {
            continue;
        };
        let points: Vec<(f64, f64)> = family
            .records
            .iter()
            .map(|r| (r.frechet_proxy, r.replication))
            .collect();
        let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let curve = RfidCurve {
            fit: PolyFit {
                degree: fit.degree,
                coefficients: fit.coefficients.clone(),
                rms_residual: fit.rms_residual,
            },
            min_origin_distance: fit.min_origin_distance.unwrap_or(f64::NAN),
            frechet_range: (lo, hi),
        };
        let path = dir.join(format!("rfid-{}.svg", report.family));
        fs::write(&path, rfid_svg(&report.family, &points, Some(&curve))).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct StudyFile {
    config_hash: String,
    config: StudyConfig,
}

/// Everything a finished study produced.
#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub config_hash: String,
    pub reference: ReferenceRun,
    /// All rows of `results.csv` in grid order.
    pub records: Vec<MetricsRecord>,
    /// Duplicate attribution of the rows computed in this invocation, keyed
    /// by run id.
    pub attributions: BTreeMap<String, DuplicateAttribution>,
    pub curves: CurvesReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Runs every missing cell of the study, at most `threads` at a time, then
/// writes the summary files.
pub fn run_study(config: &StudyConfig, threads: usize) -> Result<StudyOutcome> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    let evaluator = Evaluator::new(&dataset, config.frechet_reference)?;
    let hash = config.config_hash(&dataset.content_hash())?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let study_path = dir.join(STUDY_FILE);
    let results_path = dir.join(RESULTS_FILE);
    if study_path.exists() {
        let text = fs::read_to_string(&study_path).map_err(|e| Error::io(&study_path, e))?;
        let existing: StudyFile = serde_json::from_str(&text)?;
        if existing.config_hash != hash {
            return Err(Error::StudyConflict(dir.clone()));
        }
    } else if results_path.exists() {
        return Err(Error::StudyConflict(dir.clone()));
    }
    write_json(
        &study_path,
        &StudyFile {
            config_hash: hash.clone(),
            config: config.clone(),
        },
    )?;
    let log_path = dir.join(LOG_FILE);

    let reference_path = dir.join(REFERENCE_FILE);
    let cached = match fs::read_to_string(&reference_path) {
        Ok(text) => serde_json::from_str::<ReferenceRun>(&text)
            .ok()
            .filter(|r| r.config_hash == hash),
        Err(_) => None,
    };
    let reference = match cached {
        Some(r) => r,
        None => {
            let start = Instant::now();
            let r = reference_run(&dataset, &evaluator, config, &hash)?;
            write_json(&reference_path, &r)?;
            append(&log_path, &format!("reference {:.2}s\n", start.elapsed().as_secs_f64()))?;
            log::info!("reference model: tau = {:.5}", r.tau);
            r
        }
    };

    let mut records = if results_path.exists() {
        let file = fs::File::open(&results_path).map_err(|e| Error::io(&results_path, e))?;
        read_records(file)?
    } else {
        append(&results_path, &format!("{CSV_HEADER}\n"))?;
        Vec::new()
    };
    let grid: Vec<(NoisePolicy, u64)> = config.cells().collect();
    let grid_ids: HashSet<String> = grid.iter().map(|(p, s)| run_id(p, *s)).collect();
    if records.iter().any(|r| !grid_ids.contains(&r.run_id)) {
        return Err(Error::StudyConflict(dir.clone()));
    }
    let done: HashSet<String> = records.iter().map(|r| r.run_id.clone()).collect();
    let pending: Vec<(NoisePolicy, u64)> = grid
        .into_iter()
        .filter(|(p, s)| !done.contains(&run_id(p, *s)))
        .collect();
    log::info!("{} of {} runs already complete", done.len(), done.len() + pending.len());

    let threads = threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut attributions = BTreeMap::new();
    pool.install(|| -> Result<()> {
        for chunk in pending.chunks(threads) {
            let results: Vec<(MetricsRecord, DuplicateAttribution, f64)> = chunk
                .par_iter()
                .map(|&(policy, seed)| {
                    let start = Instant::now();
                    let (rec, attr) = run_cell(&dataset, &evaluator, config, policy, seed, reference.tau)?;
                    Ok((rec, attr, start.elapsed().as_secs_f64()))
                })
                .collect::<Result<_>>()?;
            for (rec, attr, secs) in results {
                append(&results_path, &record_to_csv_line(&rec)?)?;
                append(&log_path, &format!("{} {secs:.2}s\n", rec.run_id))?;
                log::info!(
                    "{}: R = {:.4}, frechet = {:.4}, sim_clip = {:.5}",
                    rec.run_id,
                    rec.replication,
                    rec.frechet_proxy,
                    rec.sim_clip
                );
                attributions.insert(rec.run_id.clone(), attr);
                records.push(rec);
            }
        }
        Ok(())
    })?;

    let curves = summarize(&records, reference.tau, config.stage_margin, config.curve_min_p, &hash)?;
    write_json(&dir.join(CURVES_FILE), &curves)?;
    if config.plots {
        write_plots(dir, &records, &curves)?;
    }
    Ok(StudyOutcome {
        config_hash: hash,
        reference,
        records,
        attributions,
        curves,
    })
}
