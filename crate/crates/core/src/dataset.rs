//! Synthetic image–caption corpus with labelled duplication.
//!
//! Each unique image is a 16x16 grayscale canvas (background 0) holding one
//! to three shapes placed on a 4x4 grid of cell centres. A shape is a square
//! or a disc with one of three intensities. The caption is
//!
//! ```text
//! [count token, (style token, position token) per shape ...]
//! ```
//!
//! with shapes listed in increasing grid position, so it fully describes the
//! image. The first `round(fraction_duplicated * n_unique)` unique samples are
//! repeated `duplication_factor` times; every copy shares image, caption and
//! `group_id`. A further `n_holdout` unique, never-duplicated samples form the
//! holdout split.
//!
//! On disk:
//!
//! ```text
//! manifest.json   DatasetManifest
//! images.f32      "FPAN", u32 count, u32 height, u32 width, f32 pixels (all LE)
//! captions.json   array of token-id arrays, one per sample
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{encode_caption, TokenEmbeddingSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::FeatureExtractor;
use crate::numerics::{PrngStream, StreamId};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;
const GRID: usize = 4;
const CELL: usize = IMAGE_SIDE / GRID;

pub const PAD_TOKEN: u32 = 0;
const COUNT_TOKEN_BASE: u32 = 1;
const STYLE_TOKEN_BASE: u32 = 4;
const POSITION_TOKEN_BASE: u32 = 10;
pub const VOCAB_SIZE: usize = 26;
/// Longest possible caption: count token plus two tokens per shape.
pub const MAX_CAPTION_TOKENS: usize = 7;
const MAX_SHAPES: usize = 3;

const INTENSITIES: [f32; 3] = [-0.9, 0.45, 0.9];
const MAGIC: &[u8; 4] = b"FPAN";
const FORMAT_VERSION: u32 = 1;
const MAX_SIMILARITY: f64 = 0.99;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
enum ShapeKind {
    Square,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Shape {
    kind: ShapeKind,
    intensity: usize,
    /// Grid cell, row-major in `0..16`.
    position: usize,
}

impl Shape {
    fn style_token(&self) -> u32 {
        let kind = match self.kind {
            ShapeKind::Square => 0,
            ShapeKind::Disc => 1,
        };
        STYLE_TOKEN_BASE + kind * 3 + self.intensity as u32
    }

    fn paint(&self, image: &mut [f32]) {
        let (gr, gc) = (self.position / GRID, self.position % GRID);
        let cy = (gr * CELL) as f64 + (CELL as f64 - 1.0) / 2.0;
        let cx = (gc * CELL) as f64 + (CELL as f64 - 1.0) / 2.0;
        let value = INTENSITIES[self.intensity];
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match self.kind {
                    ShapeKind::Square => dy.abs() <= 2.5 && dx.abs() <= 2.5,
                    ShapeKind::Disc => dy * dy + dx * dx <= 2.6 * 2.6,
                };
                if inside {
                    image[y * IMAGE_SIDE + x] = value;
                }
            }
        }
    }
}

fn render(shapes: &[Shape]) -> (Vec<f32>, Vec<u32>) {
    let mut image = vec![0.0f32; IMAGE_DIM];
    let mut caption = vec![COUNT_TOKEN_BASE + shapes.len() as u32 - 1];
    for s in shapes {
        s.paint(&mut image);
        caption.push(s.style_token());
        caption.push(POSITION_TOKEN_BASE + s.position as u32);
    }
    (image, caption)
}

fn random_shapes(stream: &mut PrngStream) -> Vec<Shape> {
    let count = 1 + stream.below(MAX_SHAPES);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    stream.shuffle(&mut cells);
    let mut positions = cells[..count].to_vec();
    positions.sort_unstable();
    positions
        .into_iter()
        .map(|position| Shape {
            kind: if stream.bernoulli(0.5) {
                ShapeKind::Square
            } else {
                ShapeKind::Disc
            },
            intensity: stream.below(INTENSITIES.len()),
            position,
        })
        .collect()
}

/// Generation parameters plus the per-sample layout recorded at generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_unique: usize,
    pub duplication_factor: usize,
    pub fraction_duplicated: f64,
    pub n_holdout: usize,
    pub image_seed: u64,
    pub vocab_seed: u64,
    pub feature_seed: u64,
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    /// Duplicate group of every sample, indexed by sample id.
    #[serde(default)]
    pub group_ids: Vec<u32>,
    /// Sample ids of the holdout split.
    #[serde(default)]
    pub holdout_ids: Vec<u32>,
}

impl DatasetManifest {
    pub fn new(
        n_unique: usize,
        duplication_factor: usize,
        fraction_duplicated: f64,
        n_holdout: usize,
        seed: u64,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_unique,
            duplication_factor,
            fraction_duplicated,
            n_holdout,
            image_seed: seed,
            vocab_seed: seed,
            feature_seed: FeatureExtractor::DEFAULT_SEED,
            height: IMAGE_SIDE,
            width: IMAGE_SIDE,
            vocab_size: VOCAB_SIZE,
            embed_dim: 16,
            max_len: 8,
            group_ids: Vec::new(),
            holdout_ids: Vec::new(),
        }
    }

    pub fn n_duplicated_groups(&self) -> usize {
        (self.fraction_duplicated * self.n_unique as f64).round() as usize
    }

    /// Training-split size: `n_unique + (factor - 1) * round(fraction * n_unique)`.
    pub fn n_train(&self) -> usize {
        self.n_unique + (self.duplication_factor - 1) * self.n_duplicated_groups()
    }

    pub fn n_total(&self) -> usize {
        self.n_train() + self.n_holdout
    }

    fn validate_parameters(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadManifest(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        if self.n_unique < 16 {
            return bad(format!("n_unique = {} must be at least 16", self.n_unique));
        }
        if self.duplication_factor == 0 {
            return bad("duplication_factor must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.fraction_duplicated) {
            return bad(format!(
                "fraction_duplicated = {} must lie in [0, 1]",
                self.fraction_duplicated
            ));
        }
        if self.height != IMAGE_SIDE || self.width != IMAGE_SIDE {
            return bad(format!(
                "only {IMAGE_SIDE}x{IMAGE_SIDE} images are supported, got {}x{}",
                self.height, self.width
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.max_len < MAX_CAPTION_TOKENS {
            return bad(format!(
                "max_len = {} cannot hold a {MAX_CAPTION_TOKENS}-token caption",
                self.max_len
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u32,
    pub group_id: u32,
    pub holdout: bool,
    pub image: Vec<f32>,
    pub caption: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SyntheticSample>,
    vocab: Vocabulary,
}

fn vocabulary_for(manifest: &DatasetManifest) -> Vocabulary {
    let mut stream = PrngStream::new(manifest.vocab_seed, StreamId::DataGen).substream(1);
    Vocabulary::generate(manifest.vocab_size, manifest.embed_dim, PAD_TOKEN, &mut stream)
}

/// Generates the corpus described by `manifest`. Images come from the
/// `image_seed` data stream, the vocabulary table from `vocab_seed`.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate_parameters()?;
    let mut manifest = manifest.clone();
    let fx = FeatureExtractor::new(manifest.feature_seed, IMAGE_DIM);
    let mut stream = PrngStream::new(manifest.image_seed, StreamId::DataGen);

    let n_groups = manifest.n_unique + manifest.n_holdout;
    let mut uniques: Vec<(Vec<f32>, Vec<u32>)> = Vec::with_capacity(n_groups);
    let mut seen_captions = HashSet::new();
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(n_groups);
    let mut attempts = 0;
    while uniques.len() < n_groups {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::BadManifest(format!("could not draw {n_groups} distinct images")));
        }
        let (image, caption) = render(&random_shapes(&mut stream));
        if seen_captions.contains(&caption) {
            continue;
        }
        let f = fx.extract(&image)?;
        if features.iter().any(|g| crate::metrics::dot(g, &f) >= MAX_SIMILARITY) {
            continue;
        }
        seen_captions.insert(caption.clone());
        features.push(f);
        uniques.push((image, caption));
    }

    let n_dup = manifest.n_duplicated_groups();
    let mut samples = Vec::with_capacity(manifest.n_total());
    for (group, (image, caption)) in uniques.into_iter().enumerate() {
        let holdout = group >= manifest.n_unique;
        let copies = if !holdout && group < n_dup {
            manifest.duplication_factor
        } else {
            1
        };
        for _ in 0..copies {
            samples.push(SyntheticSample {
                sample_id: samples.len() as u32,
                group_id: group as u32,
                holdout,
                image: image.clone(),
                caption: caption.clone(),
            });
        }
    }
    manifest.group_ids = samples.iter().map(|s| s.group_id).collect();
    manifest.holdout_ids = samples.iter().filter(|s| s.holdout).map(|s| s.sample_id).collect();

    let vocab = vocabulary_for(&manifest);
    let dataset = Dataset {
        manifest,
        samples,
        vocab,
    };
    dataset.validate()?;
    Ok(dataset)
}

impl Dataset {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(|s| !s.holdout)
    }

    pub fn holdout_samples(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(|s| s.holdout)
    }

    pub fn split(&self, split: Split) -> Vec<&SyntheticSample> {
        match split {
            Split::Train => self.train_samples().collect(),
            Split::Holdout => self.holdout_samples().collect(),
        }
    }

    /// Clean token embeddings of a sample's caption.
    pub fn encode(&self, sample: &SyntheticSample) -> Result<TokenEmbeddingSequence> {
        encode_caption(&sample.caption, &self.vocab, self.manifest.max_len)
    }

    /// Whether `group_id` is one of the duplicated training groups.
    pub fn is_duplicated_group(&self, group_id: u32) -> bool {
        (group_id as usize) < self.manifest.n_duplicated_groups() && self.manifest.duplication_factor > 1
    }

    /// SHA-256 over the serialized image blob and captions.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image_blob());
        h.update(self.captions_json().as_bytes());
        hex::encode(h.finalize())
    }

    fn image_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.samples.len() * IMAGE_DIM * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.manifest.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.manifest.width as u32).to_le_bytes());
        for s in &self.samples {
            for v in &s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn captions_json(&self) -> String {
        let caps: Vec<&Vec<u32>> = self.samples.iter().map(|s| &s.caption).collect();
        serde_json::to_string(&caps).expect("token lists serialize")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        write(
            "manifest.json",
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )?;
        write("images.f32", &self.image_blob())?;
        write("captions.json", self.captions_json().as_bytes())
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate_parameters()
            .map_err(|e| Error::InvalidDataset(e.to_string()))?;
        let invalid = |msg: String| Err(Error::InvalidDataset(msg));
        if self.samples.len() != m.n_total() {
            return invalid(format!(
                "{} samples, manifest arithmetic gives {}",
                self.samples.len(),
                m.n_total()
            ));
        }
        if m.group_ids.len() != self.samples.len() {
            return invalid("group_ids length differs from sample count".into());
        }
        let holdout: HashSet<u32> = m.holdout_ids.iter().copied().collect();
        if holdout.len() != m.n_holdout || m.holdout_ids.len() != m.n_holdout {
            return invalid("holdout ids are not a set of n_holdout distinct ids".into());
        }
        let mut group_content: std::collections::HashMap<u32, (&[f32], &[u32], bool)> = Default::default();
        for s in &self.samples {
            if s.image.len() != IMAGE_DIM {
                return invalid(format!("sample {} has the wrong image size", s.sample_id));
            }
            if s.image.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return invalid(format!("sample {} has pixels outside [-1, 1]", s.sample_id));
            }
            if s.caption.len() > m.max_len {
                return invalid(format!("sample {} caption too long", s.sample_id));
            }
            if s.caption.iter().any(|&t| t as usize >= m.vocab_size) {
                return invalid(format!("sample {} has an unknown token", s.sample_id));
            }
            match group_content.get(&s.group_id) {
                Some(&(img, cap, split)) => {
                    if img != s.image.as_slice() || cap != s.caption.as_slice() || split != s.holdout {
                        return invalid(format!(
                            "group {} members differ in image, caption or split",
                            s.group_id
                        ));
                    }
                }
                None => {
                    group_content.insert(s.group_id, (&s.image, &s.caption, s.holdout));
                }
            }
        }
        if group_content.len() != m.n_unique + m.n_holdout {
            return invalid(format!(
                "{} groups, expected {}",
                group_content.len(),
                m.n_unique + m.n_holdout
            ));
        }
        // Caption determinism: one caption per distinct image and vice versa.
        let mut by_caption: std::collections::HashMap<&[u32], &[f32]> = Default::default();
        for s in &self.samples {
            if let Some(img) = by_caption.insert(&s.caption, &s.image) {
                if img != s.image.as_slice() {
                    return invalid("one caption describes two different images".into());
                }
            }
        }
        if by_caption.len() != group_content.len() {
            return invalid("distinct groups share a caption".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Holdout,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Writes `images` in the `images.f32` layout.
pub fn write_image_file(path: &Path, images: &[Vec<f32>], height: usize, width: usize) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * height * width * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for img in images {
        if img.len() != height * width {
            return Err(Error::ShapeError(format!(
                "image of {} pixels in a {height}x{width} file",
                img.len()
            )));
        }
        for v in img {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an `images.f32` file, returning `(images, height, width)`.
pub fn read_image_file(path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let corrupt = |reason: String| Error::CorruptDataset {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| corrupt(e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing FPAN header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (count, height, width) = (word(4), word(8), word(12));
    let expected = 16 + count * height * width * 4;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes for {count} {height}x{width} images, found {}",
            bytes.len()
        )));
    }
    let pixels = height * width;
    let images = bytes[16..]
        .chunks_exact(pixels * 4)
        .map(|img| {
            img.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        })
        .collect();
    Ok((images, height, width))
}

/// Loads and validates a dataset directory written by [`Dataset::save`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let read_text = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::CorruptDataset {
            path,
            reason: e.to_string(),
        })
    };
    let manifest: DatasetManifest =
        serde_json::from_str(&read_text("manifest.json")?).map_err(|e| Error::CorruptDataset {
            path: dir.join("manifest.json"),
            reason: e.to_string(),
        })?;
    let captions: Vec<Vec<u32>> =
        serde_json::from_str(&read_text("captions.json")?).map_err(|e| Error::CorruptDataset {
            path: dir.join("captions.json"),
            reason: e.to_string(),
        })?;
    let (images, height, width) = read_image_file(&dir.join("images.f32"))?;

    if height != manifest.height || width != manifest.width {
        return Err(Error::InvalidDataset(format!(
            "image blob is {height}x{width}, manifest says {}x{}",
            manifest.height, manifest.width
        )));
    }
    if images.len() != manifest.group_ids.len() || captions.len() != images.len() {
        return Err(Error::InvalidDataset(format!(
            "{} images, {} captions, {} manifest entries",
            images.len(),
            captions.len(),
            manifest.group_ids.len()
        )));
    }
    let holdout: HashSet<u32> = manifest.holdout_ids.iter().copied().collect();
    let samples = images
        .into_iter()
        .zip(captions)
        .enumerate()
        .map(|(i, (image, caption))| SyntheticSample {
            sample_id: i as u32,
            group_id: manifest.group_ids[i],
            holdout: holdout.contains(&(i as u32)),
            image,
            caption,
        })
        .collect();
    let vocab = vocabulary_for(&manifest);
    let dataset = Dataset {
        manifest,
        samples,
        vocab,
    };
    dataset.validate()?;
    Ok(dataset)
}
