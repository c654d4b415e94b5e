//! Long-tailed dataset construction and the binary containers for it.
//!
//! Every random choice here draws from `ChaCha8Rng` (rand_chacha 0.9)
//! seeded with `seed_from_u64`, whose output stream is fixed across
//! platforms, so generated datasets are byte-for-byte reproducible.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ByteReader;
use crate::tensor::Tensor2;

/// Examples per class in generated balanced test sets.
pub const BALANCED_TEST_PER_CLASS: usize = 100;

/// Dense features with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor2,
    labels: Vec<usize>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::invalid(format!(
                    "label {y} at row {i} is out of range for {num_classes} classes"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_counts,
        })
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let mut class_counts = vec![0; self.num_classes];
        for &y in &labels {
            class_counts[y] += 1;
        }
        Self {
            features: self.features.select_rows(idx),
            labels,
            num_classes: self.num_classes,
            class_counts,
        }
    }

    /// Serializes to the LTDS container: magic `LTDS`, `u32` version,
    /// `u64` N, `u64` D, `u32` K, N `u32` labels, then N·D `f64`
    /// features row-major. All little-endian.
    pub fn to_ltds_bytes(&self) -> Vec<u8> {
        let (n, d) = self.features.shape();
        let mut buf = Vec::with_capacity(28 + n * 4 + n * d * 8);
        buf.extend_from_slice(LTDS_MAGIC);
        buf.extend_from_slice(&LTDS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(d as u64).to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for v in self.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_ltds_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != LTDS_MAGIC {
            return Err(Error::MalformedFile("missing LTDS magic".into()));
        }
        let version = r.u32()?;
        if version != LTDS_VERSION {
            return Err(Error::MalformedFile(format!(
                "unsupported LTDS version {version}"
            )));
        }
        let n = usize::try_from(r.u64()?)
            .map_err(|_| Error::MalformedFile("row count too large".into()))?;
        let d = usize::try_from(r.u64()?)
            .map_err(|_| Error::MalformedFile("column count too large".into()))?;
        let k = r.u32()? as usize;
        let labels = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::MalformedFile("length overflow".into()))?,
            )?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let feats = r.f64s(
            n.checked_mul(d)
                .ok_or_else(|| Error::MalformedFile("length overflow".into()))?,
        )?;
        if !r.is_empty() {
            return Err(Error::MalformedFile(
                "trailing bytes after LTDS payload".into(),
            ));
        }
        Self::new(Tensor2::from_vec(n, d, feats)?, labels, k)
            .map_err(|e| Error::MalformedFile(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ltds_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ltds_bytes(&std::fs::read(path)?)
    }
}

const LTDS_MAGIC: &[u8; 4] = b"LTDS";
const LTDS_VERSION: u32 = 1;

/// Per-class training cardinalities, most frequent class first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalityProfile {
    counts: Vec<usize>,
    target_if: f64,
}

impl CardinalityProfile {
    /// Wraps explicit counts; they must be non-increasing and positive.
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("profile has no classes"));
        }
        if counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("profile counts must be non-increasing"));
        }
        if *counts.last().unwrap() == 0 {
            return Err(Error::invalid("every class needs at least one example"));
        }
        let target_if = counts[0] as f64 / *counts.last().unwrap() as f64;
        Ok(Self { counts, target_if })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_max(&self) -> usize {
        self.counts[0]
    }

    pub fn target_if(&self) -> f64 {
        self.target_if
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Exponentially decaying counts `n_k = max(1, round(n_max · IF^(−k/(K−1))))`.
pub fn make_longtail_profile(k: usize, n_max: usize, imbalance: f64) -> Result<CardinalityProfile> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if n_max < 1 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    if !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(Error::invalid(format!(
            "imbalance factor must be a finite value >= 1, got {imbalance}"
        )));
    }
    let denom = (k - 1) as f64;
    let counts = (0..k)
        .map(|i| {
            let v = n_max as f64 * imbalance.powf(-(i as f64) / denom);
            (v.round() as usize).max(1)
        })
        .collect();
    Ok(CardinalityProfile {
        counts,
        target_if: imbalance,
    })
}

/// `max(counts) / min(counts)`.
pub fn imbalance_factor(counts: &[usize]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::invalid("imbalance factor needs at least 2 classes"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class {k} is empty; imbalance factor undefined"
        )));
    }
    let max = *counts.iter().max().unwrap();
    let min = *counts.iter().min().unwrap();
    Ok(max as f64 / min as f64)
}

/// Class mean for the synthetic Gaussian mixture.
///
/// The first two coordinates sit on a circle of radius `separation`, class
/// `k` at angle `φ + 2πk/K` where the phase `φ` comes from the seed.
/// Coordinates beyond the second get a seeded `N(0, (separation/2)²)`
/// offset per class.
fn class_means(k: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..k)
        .map(|c| {
            let angle = phase + std::f64::consts::TAU * c as f64 / k as f64;
            let mut mean = vec![separation * angle.cos(), separation * angle.sin()];
            for _ in 2..dim {
                let z: f64 = rng.sample(StandardNormal);
                mean.push(0.5 * separation * z);
            }
            mean
        })
        .collect()
}

fn sample_gaussian_rows(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    per_class: &[usize],
) -> Result<LabeledDataset> {
    let dim = means.first().map_or(0, Vec::len);
    let total: usize = per_class.iter().sum();
    let mut feats = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, (&n, mean)) in per_class.iter().zip(means).enumerate() {
        for _ in 0..n {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                feats.push(m + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor2::from_vec(total, dim, feats)?, labels, means.len())
}

/// Gaussian-mixture training set following `profile`, plus a balanced test
/// set with [`BALANCED_TEST_PER_CLASS`] rows per class drawn from the same
/// class-conditional distributions. Rows are grouped by class.
pub fn synth_gaussian_dataset(
    profile: &CardinalityProfile,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if dim < 2 {
        return Err(Error::invalid(format!("dim must be at least 2, got {dim}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let k = profile.num_classes();
    let means = class_means(k, dim, separation, seed);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(2);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(3);
    let train = sample_gaussian_rows(&mut train_rng, &means, profile.counts())?;
    let test = sample_gaussian_rows(&mut test_rng, &means, &vec![BALANCED_TEST_PER_CLASS; k])?;
    Ok((train, test))
}

/// Balanced held-out set with `per_class` rows per class, drawn from the
/// same class-conditional distributions as [`synth_gaussian_dataset`] with
/// equal arguments but on an independent stream. Used for model selection.
pub fn synth_gaussian_heldout(
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    per_class: usize,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::invalid("need at least 2 classes and dim >= 2"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let means = class_means(num_classes, dim, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    sample_gaussian_rows(&mut rng, &means, &vec![per_class; num_classes])
}

/// Keeps `profile.counts()[k]` rows of class `k`, chosen by a seeded
/// shuffle of that class's rows. Output rows are grouped by class.
pub fn subsample_longtail(
    dataset: &LabeledDataset,
    profile: &CardinalityProfile,
    seed: u64,
) -> Result<LabeledDataset> {
    if profile.num_classes() != dataset.num_classes() {
        return Err(Error::invalid(format!(
            "profile has {} classes but dataset has {}",
            profile.num_classes(),
            dataset.num_classes()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(profile.total());
    for (c, (rows, &want)) in by_class.iter_mut().zip(profile.counts()).enumerate() {
        if want > rows.len() {
            return Err(Error::invalid(format!(
                "class {c} has {} examples, {want} requested",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let mut chosen = rows[..want].to_vec();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    Ok(dataset.select(&keep))
}

/// Cardinality group of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    /// Many above 100, Few below 20, Medium for 20 through 100 inclusive.
    pub fn of(count: usize) -> Self {
        if count > 100 {
            Split::Many
        } else if count < 20 {
            Split::Few
        } else {
            Split::Medium
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplits {
    pub split_of: Vec<Split>,
}

impl ClassSplits {
    /// Number of classes in (Many, Medium, Few).
    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.split_of.iter().filter(|&&x| x == s).count();
        (count(Split::Many), count(Split::Medium), count(Split::Few))
    }
}

pub fn assign_splits(counts: &[usize]) -> ClassSplits {
    ClassSplits {
        split_of: counts.iter().map(|&n| Split::of(n)).collect(),
    }
}

/// Bytes in one CIFAR-100 binary record.
pub const CIFAR100_RECORD_LEN: usize = 3074;
const CIFAR_PIXELS: usize = 3072;

/// One decoded CIFAR-100 record, kept raw for exact re-encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse_label: u8,
    pub fine_label: u8,
    /// R, G, B planes, each 32×32 row-major.
    pub pixels: Box<[u8; CIFAR_PIXELS]>,
}

impl CifarRecord {
    pub fn to_bytes(&self) -> [u8; CIFAR100_RECORD_LEN] {
        let mut out = [0u8; CIFAR100_RECORD_LEN];
        out[0] = self.coarse_label;
        out[1] = self.fine_label;
        out[2..].copy_from_slice(&self.pixels[..]);
        out
    }
}

/// Decodes `[coarse][fine][3072 pixels]` records.
pub fn parse_cifar100_records(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR100_RECORD_LEN) {
        return Err(Error::MalformedFile(format!(
            "{} bytes is not a multiple of the {CIFAR100_RECORD_LEN}-byte record size",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR100_RECORD_LEN)
        .enumerate()
        .map(|(index, rec)| {
            if rec[1] > 99 {
                return Err(Error::MalformedRecord {
                    index,
                    reason: format!("fine label {} exceeds 99", rec[1]),
                });
            }
            Ok(CifarRecord {
                coarse_label: rec[0],
                fine_label: rec[1],
                pixels: Box::new(rec[2..].try_into().unwrap()),
            })
        })
        .collect()
}

pub fn encode_cifar100_records(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR100_RECORD_LEN);
    for r in records {
        out.extend_from_slice(&r.to_bytes());
    }
    out
}

/// Parses CIFAR-100 binary data into a 100-class dataset of 3072 features
/// (pixel bytes divided by 255), labeled by fine label.
pub fn parse_cifar100_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    let records = parse_cifar100_records(bytes)?;
    let n = records.len();
    let mut feats = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in &records {
        feats.extend(r.pixels.iter().map(|&p| p as f64 / 255.0));
        labels.push(r.fine_label as usize);
    }
    LabeledDataset::new(Tensor2::from_vec(n, CIFAR_PIXELS, feats)?, labels, 100)
}

/// Converts 3×32×32 CIFAR features to grayscale (channel mean) and
/// average-pools `factor × factor` blocks, giving `(32/factor)²` features.
pub fn cifar_grayscale_pool(dataset: &LabeledDataset, factor: usize) -> Result<LabeledDataset> {
    if dataset.dim() != CIFAR_PIXELS {
        return Err(Error::invalid(format!(
            "expected {CIFAR_PIXELS} CIFAR features, got {}",
            dataset.dim()
        )));
    }
    if factor == 0 || 32 % factor != 0 {
        return Err(Error::invalid(format!(
            "pool factor {factor} must divide 32"
        )));
    }
    let side = 32 / factor;
    let norm = 1.0 / (3 * factor * factor) as f64;
    let mut feats = Vec::with_capacity(dataset.len() * side * side);
    for row in dataset.features().row_iter() {
        for by in 0..side {
            for bx in 0..side {
                let mut s = 0.0;
                for plane in 0..3 {
                    for y in by * factor..(by + 1) * factor {
                        for x in bx * factor..(bx + 1) * factor {
                            s += row[plane * 1024 + y * 32 + x];
                        }
                    }
                }
                feats.push(s * norm);
            }
        }
    }
    LabeledDataset::new(
        Tensor2::from_vec(dataset.len(), side * side, feats)?,
        dataset.labels().to_vec(),
        dataset.num_classes(),
    )
}
