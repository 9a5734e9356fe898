//! Dataset ingestion and the poisoned-dataset artifact.
//!
//! Three sources: a seeded synthetic corpus (class-conditional oriented
//! gratings, self-contained for desk-scale runs), the common small-image
//! binary corpus layout (one label byte + interleaved channel planes per
//! record), and a directory of image files with a labels manifest.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{load_pixels_png, save_pixels_png};
use crate::error::{Error, Result};
use crate::poison::PoisonRecord;
use crate::vit::{ImageSample, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Seeded synthetic oriented-grating corpus; needs no files on disk.
    #[default]
    Synthetic,
    /// Binary batch files: 1 label byte + channel-planar pixel bytes.
    Cifar10,
    /// Directory with `train/` and `test/` subdirectories, each holding
    /// image files plus a `labels.csv` of `filename,label` lines.
    ImageDir,
}

/// Where the data comes from and how it is split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Source directory for file-backed kinds. Ignored for synthetic data.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Class subset in remap order: original label `classes[i]` becomes
    /// label `i`. For synthetic data only the length matters.
    pub classes: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            classes: vec![0, 1],
            train_per_class: 1000,
            test_per_class: 200,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Input("need at least two classes".into()));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::Input("class subset contains duplicates".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Input("per-class sample counts must be >= 1".into()));
        }
        if self.kind != DatasetKind::Synthetic && self.path.is_none() {
            return Err(Error::Input(
                "file-backed dataset kinds require a path".into(),
            ));
        }
        Ok(())
    }
}

/// Train and test splits, labels remapped to 0..n_classes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn load_dataset(spec: &DatasetSpec, config: &ModelConfig) -> Result<Dataset> {
    spec.validate()?;
    if spec.n_classes() != config.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model expects {}",
            spec.n_classes(),
            config.n_classes
        )));
    }
    match spec.kind {
        DatasetKind::Synthetic => Ok(generate_synthetic(spec, config)),
        DatasetKind::Cifar10 => load_cifar_binary(spec, config),
        DatasetKind::ImageDir => load_image_dir(spec, config),
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// One synthetic sample: a field of oriented micro-gratings. Each tile
/// carries the image's class orientation plus local jitter, so class
/// evidence is local texture that aggregates over the image. Per-image
/// orientation jitter overlaps across classes, leaving an irreducible
/// error and real boundary pressure at convergence. Pixels are quantized
/// to the 8-bit grid like a real small-image corpus.
fn synthetic_sample(
    rng: &mut ChaCha8Rng,
    class: usize,
    n_classes: usize,
    config: &ModelConfig,
) -> ImageSample {
    let s = config.image_size;
    let tile = 4usize.min(s);
    let sep = 36.0f64.to_radians();
    let image_jitter = 22.0f64.to_radians();
    let tile_jitter = 8.0f64.to_radians();
    let theta_image = sep * class as f64 / (n_classes - 1).max(1) as f64
        + rng.gen_range(-image_jitter..image_jitter);
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let mut base = Vec::with_capacity(config.channels);
    let mut amp = Vec::with_capacity(config.channels);
    for _ in 0..config.channels {
        base.push(rng.gen_range(0.40..0.60));
        // Subtle texture: class evidence is learnable but lives at an
        // amplitude where small-norm perturbations genuinely move features,
        // matching the non-robustness of classifiers on natural images.
        amp.push(rng.gen_range(0.12..0.22));
    }
    let tiles = s / tile;
    let mut pixels = Array3::<f64>::zeros((config.channels, s, s));
    for ti in 0..tiles {
        for tj in 0..tiles {
            let theta = theta_image + rng.gen_range(-tile_jitter..tile_jitter);
            let freq = rng.gen_range(0.9..1.5); // cycles per tile
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dir_x, dir_y) = (theta.cos(), theta.sin());
            for di in 0..tile {
                for dj in 0..tile {
                    let t = (dj as f64 * dir_x + di as f64 * dir_y) / tile as f64;
                    let wave = (std::f64::consts::TAU * freq * t + phase).sin();
                    for c in 0..config.channels {
                        let v = base[c] + amp[c] * wave + noise.sample(rng);
                        pixels[[c, ti * tile + di, tj * tile + dj]] =
                            ((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0;
                    }
                }
            }
        }
    }
    ImageSample { pixels, label: class }
}

fn generate_synthetic(spec: &DatasetSpec, config: &ModelConfig) -> Dataset {
    let n = spec.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(n * spec.train_per_class);
    let mut test = Vec::with_capacity(n * spec.test_per_class);
    // Interleave classes so naive batch order is balanced.
    for i in 0..spec.train_per_class {
        for class in 0..n {
            let _ = i;
            train.push(synthetic_sample(&mut rng, class, n, config));
        }
    }
    for _ in 0..spec.test_per_class {
        for class in 0..n {
            test.push(synthetic_sample(&mut rng, class, n, config));
        }
    }
    Dataset { train, test }
}

// ---------------------------------------------------------------------------
// Binary corpus (label byte + channel planes)

fn load_cifar_binary(spec: &DatasetSpec, config: &ModelConfig) -> Result<Dataset> {
    if config.image_size != 32 || config.channels != 3 {
        return Err(Error::Config(
            "the binary corpus format is 32x32 RGB; adjust the model config".into(),
        ));
    }
    let dir = spec.path.as_ref().expect("validated");
    let train_files: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let test_files = vec![dir.join("test_batch.bin")];
    let train = read_binary_batches(&train_files, spec, config, spec.train_per_class)?;
    let test = read_binary_batches(&test_files, spec, config, spec.test_per_class)?;
    Ok(Dataset { train, test })
}

fn read_binary_batches(
    files: &[PathBuf],
    spec: &DatasetSpec,
    config: &ModelConfig,
    per_class: usize,
) -> Result<Vec<ImageSample>> {
    const REC: usize = 1 + 3 * 32 * 32;
    let remap: BTreeMap<usize, usize> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(new, &orig)| (orig, new))
        .collect();
    let mut counts = vec![0usize; spec.n_classes()];
    let mut out = Vec::new();
    'files: for file in files {
        let mut bytes = Vec::new();
        std::fs::File::open(file)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", file.display())))?
            .read_to_end(&mut bytes)?;
        if bytes.len() % REC != 0 {
            return Err(Error::Input(format!(
                "{} is not a whole number of records",
                file.display()
            )));
        }
        for rec in bytes.chunks_exact(REC) {
            let Some(&new_label) = remap.get(&(rec[0] as usize)) else {
                continue;
            };
            if counts[new_label] >= per_class {
                continue;
            }
            let mut pixels = Array3::<f64>::zeros((3, 32, 32));
            for c in 0..3 {
                for i in 0..32 {
                    for j in 0..32 {
                        let b = rec[1 + c * 1024 + i * 32 + j] as u16;
                        pixels[[c, i, j]] = (b * 257) as f64 / 65535.0;
                    }
                }
            }
            counts[new_label] += 1;
            out.push(ImageSample {
                pixels,
                label: new_label,
            });
            if counts.iter().all(|&c| c >= per_class) {
                break 'files;
            }
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count < per_class {
            return Err(Error::Input(format!(
                "class {class} has only {count} samples, need {per_class}"
            )));
        }
    }
    let _ = config;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Image directory with labels manifest

fn load_image_dir(spec: &DatasetSpec, config: &ModelConfig) -> Result<Dataset> {
    let dir = spec.path.as_ref().expect("validated");
    let train = read_labeled_dir(&dir.join("train"), spec, config, spec.train_per_class)?;
    let test = read_labeled_dir(&dir.join("test"), spec, config, spec.test_per_class)?;
    Ok(Dataset { train, test })
}

fn read_labeled_dir(
    dir: &Path,
    spec: &DatasetSpec,
    config: &ModelConfig,
    per_class: usize,
) -> Result<Vec<ImageSample>> {
    let manifest = dir.join("labels.csv");
    let raw = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", manifest.display())))?;
    let remap: BTreeMap<usize, usize> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(new, &orig)| (orig, new))
        .collect();
    let mut rows: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| {
            Error::Input(format!(
                "{}:{}: expected `filename,label`",
                manifest.display(),
                lineno + 1
            ))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Input(format!(
                "{}:{}: label `{label}` is not an integer",
                manifest.display(),
                lineno + 1
            ))
        })?;
        rows.push((file.trim().to_string(), label));
    }
    rows.sort();
    let mut counts = vec![0usize; spec.n_classes()];
    let mut out = Vec::new();
    for (file, orig_label) in rows {
        let Some(&label) = remap.get(&orig_label) else {
            continue;
        };
        if counts[label] >= per_class {
            continue;
        }
        let pixels = load_pixels_png(&dir.join(&file))?;
        let shape = pixels.shape().to_vec();
        if shape != [config.channels, config.image_size, config.image_size] {
            return Err(Error::Dimension(format!(
                "{file}: image shape {shape:?} does not match the model config"
            )));
        }
        counts[label] += 1;
        out.push(ImageSample { pixels, label });
    }
    for (class, &count) in counts.iter().enumerate() {
        if count < per_class {
            return Err(Error::Input(format!(
                "class {class} has only {count} usable images, need {per_class}"
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Poisoned dataset artifact

pub const POISON_MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of the poisoned-dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub label: usize,
    pub is_poisoned: bool,
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patched_source_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sub_trigger_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_feature_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_feature_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linf_used: Option<f64>,
}

/// Write every training sample as a lossless image plus one manifest line
/// per sample. Poisoned entries carry their optimization bookkeeping.
pub fn save_poisoned_dataset(
    dir: &Path,
    samples: &[ImageSample],
    records: &[PoisonRecord],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let by_origin: BTreeMap<usize, &PoisonRecord> =
        records.iter().map(|r| (r.target_origin, r)).collect();
    let mut manifest = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let file = format!("{i:05}.png");
        save_pixels_png(&sample.pixels, &dir.join(&file))?;
        let entry = match by_origin.get(&i) {
            Some(rec) => ManifestEntry {
                sample_id: i,
                label: sample.label,
                is_poisoned: true,
                file,
                patched_source_id: Some(rec.patched_source_id),
                sub_trigger_index: Some(rec.sub_trigger_index),
                initial_feature_dist: Some(rec.initial_feature_dist),
                final_feature_dist: Some(rec.final_feature_dist),
                linf_used: Some(rec.linf_used),
            },
            None => ManifestEntry {
                sample_id: i,
                label: sample.label,
                is_poisoned: false,
                file,
                patched_source_id: None,
                sub_trigger_index: None,
                initial_feature_dist: None,
                final_feature_dist: None,
                linf_used: None,
            },
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    std::fs::write(dir.join(POISON_MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Load a poisoned dataset directory back into samples + manifest entries.
pub fn load_poisoned_dataset(dir: &Path) -> Result<(Vec<ImageSample>, Vec<ManifestEntry>)> {
    let manifest_path = dir.join(POISON_MANIFEST_FILE);
    let raw = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", manifest_path.display())))?;
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::Input(format!(
                "{}:{}: {e}",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        if entry.sample_id != samples.len() {
            return Err(Error::Input(format!(
                "manifest entries out of order at line {}",
                lineno + 1
            )));
        }
        let pixels = load_pixels_png(&dir.join(&entry.file))?;
        samples.push(ImageSample {
            pixels,
            label: entry.label,
        });
        entries.push(entry);
    }
    if samples.is_empty() {
        return Err(Error::Input(format!(
            "{} holds no samples",
            manifest_path.display()
        )));
    }
    Ok((samples, entries))
}
