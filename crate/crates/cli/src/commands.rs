//! Subcommand arguments and handlers.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgAction, Args};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use fpan_core::dataset::{
    generate_dataset, load_dataset, read_image_file, write_image_file, Dataset, DatasetManifest, Split, IMAGE_SIDE,
};
use fpan_core::denoiser::{load_checkpoint, save_checkpoint, Checkpoint, OutputParam};
use fpan_core::diffusion::{train_from, write_loss_trace, SamplerConfig, TrainConfig};
use fpan_core::embeddings::{NoisePolicy, PolicyKind, PolicyOptions, TokenEmbeddingSequence};
use fpan_core::experiments::{
    self, generate, run_id, run_study, summarize, threads_from_env, write_plots, Evaluator, StudyConfig,
    DEFAULT_CURVE_MIN_P, DEFAULT_REFERENCE_SEED, DEFAULT_STAGE_MARGIN,
};
use fpan_core::metrics::{read_records, write_records, MetricsRecord, RECOMMENDED_GENERATED};
use fpan_core::numerics::{PrngStream, StreamId};
use fpan_core::stats_verify::{
    empirical_report, per_dimension_moments, predict_moments, write_reports, REFERENCE_POPULATION,
};

use crate::Failure;

const DEFAULT_SEED: u64 = 1;
const LOSS_FILE: &str = "loss.csv";

/// Dataset shape used by `gen-data` defaults and by `verify-stats` when no
/// dataset is given.
const DEFAULT_N_UNIQUE: usize = 64;
const DEFAULT_DUP_FACTOR: usize = 4;
const DEFAULT_FRAC_DUP: f64 = 0.25;
const DEFAULT_N_HOLDOUT: usize = 64;

/// Parses a flag value with the same spelling its JSON config key uses.
fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("error: {msg}\n\nFor more information, try '--help'."))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| usage(format!("--{flag} is required (on the command line or in --config)")))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// The policy flags shared by `train` and `eval`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PolicyArgs {
    /// Noise policy: none, gn, fpan, cpan, or rm.
    #[arg(long, default_value = "none", value_parser = parse_serde::<PolicyKind>)]
    pub policy: PolicyKind,
    /// Noise standard deviation (gn, fpan, cpan).
    #[arg(long)]
    pub w: Option<f64>,
    /// Per-token (fpan) or per-caption (cpan) noise probability.
    #[arg(long)]
    pub p: Option<f64>,
    /// Per-token masking probability (rm).
    #[arg(long)]
    pub q: Option<f64>,
}

impl PolicyArgs {
    fn policy(&self) -> Result<NoisePolicy, Failure> {
        NoisePolicy::from_parts(self.policy, self.w, self.p, self.q).map_err(usage)
    }
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Number of distinct (image, caption) groups in the training split.
    #[arg(long, default_value_t = DEFAULT_N_UNIQUE)]
    pub n_unique: usize,
    /// Copies of each duplicated group.
    #[arg(long, default_value_t = DEFAULT_DUP_FACTOR)]
    pub dup_factor: usize,
    /// Fraction of groups that are duplicated.
    #[arg(long, default_value_t = DEFAULT_FRAC_DUP)]
    pub frac_dup: f64,
    /// Disjoint groups kept out of training.
    #[arg(long, default_value_t = DEFAULT_N_HOLDOUT)]
    pub n_holdout: usize,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

pub fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let out = required(args.out, "out")?;
    let manifest = DatasetManifest::new(args.n_unique, args.dup_factor, args.frac_dup, args.n_holdout, args.seed);
    let dataset = generate_dataset(&manifest).map_err(usage)?;
    dataset
        .save(&out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    eprintln!(
        "wrote {} training and {} holdout samples to {} (content hash {})",
        dataset.manifest.n_train(),
        dataset.manifest.n_holdout,
        out.display(),
        dataset.content_hash()
    );
    Ok(())
}

/// Training hyperparameters shared by `train` and `sweep`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainingArgs {
    /// Training iterations.
    #[arg(long, default_value_t = TrainConfig::default().iters)]
    pub iters: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Samples per minibatch.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Fraction of iterations spent on linear learning-rate warm-up.
    #[arg(long, default_value_t = TrainConfig::default().warmup_fraction)]
    pub warmup_fraction: f64,
    /// Diffusion length T.
    #[arg(long, default_value_t = TrainConfig::default().timesteps)]
    pub timesteps: usize,
    /// Hidden width of the denoiser.
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    pub hidden: usize,
    /// Apply the policy to padding tokens as well as caption tokens.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub noise_on_padding: bool,
    /// Denoiser output head: clean_image or direct.
    #[arg(long, default_value = "clean_image", value_parser = parse_serde::<OutputParam>)]
    pub output: OutputParam,
}

impl TrainingArgs {
    fn config(&self) -> Result<TrainConfig, Failure> {
        let config = TrainConfig {
            iters: self.iters,
            lr: self.lr,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup_fraction,
            timesteps: self.timesteps,
            hidden: self.hidden,
            noise_on_padding: self.noise_on_padding,
            output: self.output,
        };
        config.validate().map_err(usage)?;
        Ok(config)
    }
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory to write (also receives loss.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
    /// Split to train on.
    #[arg(long, default_value = "train", value_parser = parse_serde::<Split>)]
    pub split: Split,
    /// Checkpoint to continue from instead of fresh weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let data = required(args.data, "data")?;
    let out = required(args.out, "out")?;
    let policy = args.policy.policy()?;
    let config = args.training.config()?;
    if args.init.as_deref() == Some(out.as_path()) {
        return Err(usage("--out must differ from --init"));
    }

    let dataset = load(&data)?;
    let init = match &args.init {
        Some(dir) => Some(
            load_checkpoint(dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?
                .params,
        ),
        None => None,
    };
    let holdout = args.split == Split::Holdout;
    let trained = train_from(&dataset, holdout, &policy, &config, args.seed, init)?;
    let metadata = json!({
        "policy": policy,
        "seed": args.seed,
        "split": args.split,
        "train": config,
        "dataset_hash": dataset.content_hash(),
        "init": args.init,
    });
    save_checkpoint(
        &out,
        &Checkpoint {
            params: trained.params,
            metadata,
        },
    )?;
    let loss_path = out.join(LOSS_FILE);
    let file = File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    write_loss_trace(BufWriter::new(file), &trained.loss_trace)?;
    let tail = &trained.loss_trace[trained.loss_trace.len().saturating_sub(100)..];
    eprintln!(
        "trained {policy} for {} iterations; mean loss over the last {} = {:.5}; checkpoint in {}",
        config.iters,
        tail.len(),
        tail.iter().map(|&l| f64::from(l)).sum::<f64>() / tail.len() as f64,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose training captions serve as prompts.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of images.
    #[arg(long, default_value_t = RECOMMENDED_GENERATED)]
    pub n: usize,
    /// Sampler steps.
    #[arg(long, default_value_t = SamplerConfig::default().steps)]
    pub steps: usize,
    /// Output image file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

pub fn sample(args: SampleArgs) -> Result<(), Failure> {
    let checkpoint = required(args.checkpoint, "checkpoint")?;
    let data = required(args.data, "data")?;
    let out = required(args.out, "out")?;
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let sampler = SamplerConfig { steps: args.steps };

    let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    sampler.timesteps(ckpt.params.config.timesteps).map_err(usage)?;
    let dataset = load(&data)?;
    let images = generate(&ckpt.params, &dataset, args.n, &sampler, args.seed)?;
    create_parent(&out)?;
    write_image_file(&out, &images, IMAGE_SIDE, IMAGE_SIDE)?;
    eprintln!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Dataset the images are compared against.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated image file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Overfitting threshold; alternatively give --reference-images.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Images from a model never trained on the training split; their
    /// similarity to the training set becomes the threshold.
    #[arg(long)]
    pub reference_images: Option<PathBuf>,
    /// Split whose images form the Fréchet reference: holdout or train.
    #[arg(long, default_value = "holdout", value_parser = parse_serde::<Split>)]
    pub frechet_reference: Split,
    /// Policy that produced the model, recorded in the row.
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyArgs,
    /// Row identifier; derived from the policy and seed when omitted.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Metrics CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seed of the model, recorded in the row.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let data = required(args.data, "data")?;
    let images_path = required(args.images, "images")?;
    let out = required(args.out, "out")?;
    let policy = args.policy.policy()?;
    match (&args.tau, &args.reference_images) {
        (Some(_), Some(_)) => return Err(usage("give either --tau or --reference-images, not both")),
        (None, None) => return Err(usage("one of --tau or --reference-images is required")),
        (Some(t), None) if !t.is_finite() => return Err(usage("--tau must be finite")),
        _ => {}
    }

    let dataset = load(&data)?;
    let evaluator = Evaluator::new(&dataset, args.frechet_reference)?;
    let read = |p: &Path| read_image_file(p).with_context(|| format!("reading images {}", p.display()));
    let (images, _, _) = read(&images_path)?;
    let tau = match (args.tau, &args.reference_images) {
        (Some(t), _) => t,
        (None, Some(p)) => evaluator.tau(&read(p)?.0)?,
        (None, None) => unreachable!("checked above"),
    };
    let evaluation = evaluator.evaluate(&images)?;
    let attribution = evaluator.duplicate_attribution(&evaluation.replication);
    let id = args.run_id.unwrap_or_else(|| run_id(&policy, args.seed));
    let record = evaluation.record(id, policy, args.seed, tau);

    create_parent(&out)?;
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    write_records(BufWriter::new(file), std::slice::from_ref(&record))?;
    eprintln!(
        "{}: R = {:.4}, frechet = {:.4}, sim_clip = {:.5} (tau {:.5}{})",
        record.run_id,
        record.replication,
        record.frechet_proxy,
        record.sim_clip,
        tau,
        if record.overfit_flag() { ", overfitting" } else { "" }
    );
    eprintln!(
        "top {} replicated images: {:.0}% match duplicated groups (chance {:.0}%)",
        attribution.top_count,
        100.0 * attribution.hit_rate,
        100.0 * attribution.chance
    );
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Study directory (created, or resumed if it already holds results).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated policy kinds; each is crossed with its parameter grids.
    #[arg(long, value_delimiter = ',', default_value = "fpan", value_parser = parse_serde::<PolicyKind>)]
    pub policy: Vec<PolicyKind>,
    /// Noise intensities for gn, fpan, and cpan.
    #[arg(long, value_delimiter = ',', default_value = "0,0.4,0.8,1.2,1.7,2.2")]
    pub w_grid: Vec<f64>,
    /// Noise probabilities for fpan and cpan.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub p_grid: Vec<f64>,
    /// Masking probabilities for rm.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5])]
    pub q_grid: Vec<f64>,
    /// Training seeds; every policy runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
    /// Sampler steps.
    #[arg(long, default_value_t = SamplerConfig::default().steps)]
    pub steps: usize,
    /// Images generated per run.
    #[arg(long, default_value_t = RECOMMENDED_GENERATED)]
    pub n_generated: usize,
    /// Split whose images form the Fréchet reference: holdout or train.
    #[arg(long, default_value = "holdout", value_parser = parse_serde::<Split>)]
    pub frechet_reference: Split,
    /// Relative Fréchet rise that starts the underfitting stage.
    #[arg(long, default_value_t = DEFAULT_STAGE_MARGIN)]
    pub stage_margin: f64,
    /// Noise probabilities at or below this are left out of p-sweep curves.
    #[arg(long, default_value_t = DEFAULT_CURVE_MIN_P)]
    pub curve_min_p: f64,
    /// Also write an SVG of every trade-off curve.
    #[arg(long)]
    pub plots: bool,
    /// Seed of the holdout-trained reference model behind the threshold.
    #[arg(long, default_value_t = DEFAULT_REFERENCE_SEED)]
    pub seed: u64,
}

impl SweepArgs {
    fn policies(&self) -> Result<Vec<NoisePolicy>, Failure> {
        let mut out = Vec::new();
        for &kind in &self.policy {
            let params: Vec<(Option<f64>, Option<f64>, Option<f64>)> = match kind {
                PolicyKind::None => vec![(None, None, None)],
                PolicyKind::Gn => self.w_grid.iter().map(|&w| (Some(w), None, None)).collect(),
                PolicyKind::Fpan | PolicyKind::Cpan => self
                    .w_grid
                    .iter()
                    .flat_map(|&w| self.p_grid.iter().map(move |&p| (Some(w), Some(p), None)))
                    .collect(),
                PolicyKind::Rm => self.q_grid.iter().map(|&q| (None, None, Some(q))).collect(),
            };
            for (w, p, q) in params {
                out.push(NoisePolicy::from_parts(kind, w, p, q).map_err(usage)?);
            }
        }
        Ok(out)
    }
}

pub fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let config = StudyConfig {
        dataset: required(args.data.clone(), "data")?,
        output_dir: required(args.out.clone(), "out")?,
        train: args.training.config()?,
        sampler: SamplerConfig { steps: args.steps },
        policies: args.policies()?,
        seeds: args.seeds.clone(),
        n_generated: args.n_generated,
        reference_seed: args.seed,
        frechet_reference: args.frechet_reference,
        stage_margin: args.stage_margin,
        curve_min_p: args.curve_min_p,
        plots: args.plots,
    };
    config.validate().map_err(usage)?;
    let threads = threads_from_env();
    eprintln!(
        "running {} cells on {threads} thread(s) into {}",
        config.policies.len() * config.seeds.len(),
        config.output_dir.display()
    );
    let outcome = run_study(&config, threads).map_err(|e| match e {
        fpan_core::Error::StudyConflict(dir) => Failure::Runtime(anyhow::anyhow!(
            "{} holds results of a different study configuration; choose another --out",
            dir.display()
        )),
        other => Failure::Runtime(other.into()),
    })?;
    eprintln!(
        "tau = {:.5} (reference seed {})",
        outcome.reference.tau, outcome.reference.seed
    );
    print_records(&outcome.records);
    for (id, a) in &outcome.attributions {
        eprintln!(
            "{id}: top {} replicated images hit duplicated groups {:.0}% of the time (chance {:.0}%)",
            a.top_count,
            100.0 * a.hit_rate,
            100.0 * a.chance
        );
    }
    print_curves(&outcome.curves);
    Ok(())
}

fn print_records(records: &[MetricsRecord]) {
    eprintln!("{:<24} {:>8} {:>9} {:>9}  overfit", "run", "R", "frechet", "sim_clip");
    for r in records {
        eprintln!(
            "{:<24} {:>8.4} {:>9.4} {:>9.5}  {}",
            r.run_id,
            r.replication,
            r.frechet_proxy,
            r.sim_clip,
            if r.overfit_flag() { "yes" } else { "no" }
        );
    }
}

fn print_curves(curves: &experiments::CurvesReport) {
    for f in &curves.families {
        let distance = f
            .rfid
            .as_ref()
            .and_then(|c| c.min_origin_distance)
            .map_or_else(|| "n/a".to_owned(), |d| format!("{d:.4}"));
        eprintln!("{}: trade-off curve distance to origin {distance}", f.family);
        if let Some(stages) = &f.stages {
            let labels: Vec<String> = stages
                .labels
                .iter()
                .map(|(w, l)| format!("{w}={}", serde_json::to_value(l).expect("label serializes")))
                .collect();
            eprintln!("  stages: {}", labels.join(" ").replace('"', ""));
            match stages.crossing_w {
                Some(w) => eprintln!("  sim_clip falls to the threshold at w = {w}"),
                None => eprintln!("  sim_clip does not cross the threshold on this grid"),
            }
        }
    }
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct FitCurveArgs {
    /// Results CSV from `sweep` or concatenated `eval` rows.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Curves JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overfitting threshold; defaults to the tau column, which must then be
    /// the same in every row.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Relative Fréchet rise that starts the underfitting stage.
    #[arg(long, default_value_t = DEFAULT_STAGE_MARGIN)]
    pub stage_margin: f64,
    /// Noise probabilities at or below this are left out of p-sweep curves.
    #[arg(long, default_value_t = DEFAULT_CURVE_MIN_P)]
    pub curve_min_p: f64,
    /// Directory for SVG plots of each trade-off curve.
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Accepted for uniformity; fitting draws no random numbers.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

pub fn fit_curve(args: FitCurveArgs) -> Result<(), Failure> {
    let results = required(args.results, "results")?;
    let out = required(args.out, "out")?;
    if !(args.stage_margin >= 0.0 && args.stage_margin.is_finite()) {
        return Err(usage("--stage-margin must be >= 0"));
    }
    if !(0.0..=1.0).contains(&args.curve_min_p) {
        return Err(usage("--curve-min-p must lie in [0, 1]"));
    }

    let file = File::open(&results).with_context(|| format!("opening {}", results.display()))?;
    let records = read_records(file)?;
    let tau = match args.tau {
        Some(t) => t,
        None => {
            let first = records.first().context("results file has no rows")?.tau;
            if records.iter().any(|r| r.tau != first) {
                return Err(usage("rows disagree on tau; pass --tau"));
            }
            first
        }
    };
    let curves = summarize(&records, tau, args.stage_margin, args.curve_min_p, "")?;
    create_parent(&out)?;
    fs::write(
        &out,
        serde_json::to_string_pretty(&curves).context("serializing curves")? + "\n",
    )
    .with_context(|| format!("writing {}", out.display()))?;
    if let Some(dir) = &args.plots {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_plots(dir, &records, &curves)?;
    }
    print_curves(&curves);
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct VerifyStatsArgs {
    /// Comma-separated policy kinds to check.
    #[arg(long, value_delimiter = ',', default_value = "fpan", value_parser = parse_serde::<PolicyKind>)]
    pub policy: Vec<PolicyKind>,
    /// Noise standard deviation (gn, fpan, cpan).
    #[arg(long, default_value_t = 1.7)]
    pub w: f64,
    /// Noise probability (fpan, cpan).
    #[arg(long, default_value_t = 0.6)]
    pub p: f64,
    /// Masking probability (rm).
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
    /// Embedding entries drawn per policy.
    #[arg(long, default_value_t = 1_000_000)]
    pub n: usize,
    /// Dataset whose encoded training captions form the population; a
    /// default dataset generated from --seed is used when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Apply the policy to padding tokens as well as caption tokens.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub noise_on_padding: bool,
    /// Report CSV; written to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-dimension moments to this CSV.
    #[arg(long)]
    pub per_dimension: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

pub fn verify_stats(args: VerifyStatsArgs) -> Result<(), Failure> {
    let policies = args
        .policy
        .iter()
        .map(|&kind| NoisePolicy::from_parts(kind, Some(args.w), Some(args.p), Some(args.q)).map_err(usage))
        .collect::<Result<Vec<_>, _>>()?;
    if args.n < fpan_core::stats_verify::MIN_SAMPLES {
        return Err(usage(format!(
            "--n must be at least {}",
            fpan_core::stats_verify::MIN_SAMPLES
        )));
    }

    let dataset = match &args.data {
        Some(dir) => load(dir)?,
        None => generate_dataset(&DatasetManifest::new(
            DEFAULT_N_UNIQUE,
            DEFAULT_DUP_FACTOR,
            DEFAULT_FRAC_DUP,
            DEFAULT_N_HOLDOUT,
            args.seed,
        ))?,
    };
    let population = dataset
        .train_samples()
        .map(|s| dataset.encode(s))
        .collect::<fpan_core::Result<Vec<TokenEmbeddingSequence>>>()?;
    let opts = PolicyOptions {
        noise_on_padding: args.noise_on_padding,
    };
    let base = PrngStream::new(args.seed, StreamId::PolicyNoise);
    let reports = policies
        .iter()
        .enumerate()
        .map(|(i, policy)| empirical_report(policy, &population, &mut base.substream(i as u64), args.n, opts))
        .collect::<fpan_core::Result<Vec<_>>>()?;

    match &args.out {
        Some(path) => {
            create_parent(path)?;
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_reports(BufWriter::new(file), &reports)?;
        }
        None => write_reports(io::stdout().lock(), &reports)?,
    }
    if let Some(path) = &args.per_dimension {
        write_per_dimension(path, &policies, &population, &args, opts)?;
    }

    let (ref_mean, ref_std) = REFERENCE_POPULATION;
    let mut failed = Vec::new();
    for r in &reports {
        let doc = predict_moments(&r.policy, ref_mean, ref_std);
        eprintln!(
            "{}: mean {:+.4} (predicted {:+.4}, band ±{:.4}), std {:.4} (predicted {:.4}, error {:.2}%) {}",
            r.policy,
            r.output_mean,
            r.predicted_mean,
            r.mean_band,
            r.output_std,
            r.predicted_std,
            100.0 * r.rel_err_std,
            if r.passes() { "ok" } else { "FAIL" }
        );
        eprintln!(
            "  dataset entries: mean {:+.4}, std {:.4}; CLIP reference entries ({ref_mean}, {ref_std}) would give mean {:+.4}, std {:.4}",
            r.input_mean, r.input_std, doc.mean, doc.std
        );
        if !r.passes() {
            failed.push(r.policy.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "tolerance exceeded for {}",
            failed.join(", ")
        )))
    }
}

fn write_per_dimension(
    path: &Path,
    policies: &[NoisePolicy],
    population: &[TokenEmbeddingSequence],
    args: &VerifyStatsArgs,
    opts: PolicyOptions,
) -> anyhow::Result<()> {
    let entries_per_sequence = population.first().map_or(1, |s| s.tokens().len()).max(1);
    let n_sequences = args.n.div_ceil(entries_per_sequence);
    create_parent(path)?;
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(
        out,
        "policy_kind,w,p,q,dimension,output_mean,output_std,predicted_mean,predicted_std"
    )?;
    let base = PrngStream::new(args.seed, StreamId::PolicyNoise).substream(1 << 32);
    for (i, policy) in policies.iter().enumerate() {
        let rows = per_dimension_moments(policy, population, &mut base.substream(i as u64), n_sequences, opts)?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for (dim, empirical, predicted) in rows {
            writeln!(
                out,
                "{},{},{},{},{dim},{},{},{},{}",
                policy.kind(),
                fmt(policy.w()),
                fmt(policy.p()),
                fmt(policy.q()),
                empirical.mean,
                empirical.std,
                predicted.mean,
                predicted.std
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
