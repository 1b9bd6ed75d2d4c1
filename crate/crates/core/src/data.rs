//! CIFAR-100 ingestion, per-channel standardization, balanced subsets and
//! seeded batching.
//!
//! The binary distribution stores one 3074-byte record per image: a coarse
//! label byte, a fine label byte, then 1024 red, 1024 green and 1024 blue
//! pixel bytes, each plane row-major. Pixels are kept as bytes and mapped to
//! `(byte / 255 - mean_c) / std_c` when a batch is materialized, with the
//! channel statistics taken from the training split. No augmentation is
//! applied anywhere.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CLASSES: usize = 100;
pub const COARSE_CLASSES: usize = 20;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = 3 * PLANE;
pub const RECORD_LEN: usize = 2 + IMAGE_BYTES;
pub const TRAIN_LEN: usize = 50_000;
pub const TEST_LEN: usize = 10_000;
pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Test => "test.bin",
        }
    }
}

/// Per-channel mean and standard deviation of `byte / 255`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Population statistics over every pixel of `pixels` (whole images).
    pub fn compute(pixels: &[u8]) -> Self {
        let images = pixels.len() / IMAGE_BYTES;
        let count = (images * PLANE) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        if images == 0 {
            return Self::IDENTITY;
        }
        for c in 0..3 {
            let mut hist = [0u64; 256];
            for img in pixels.chunks_exact(IMAGE_BYTES) {
                for &b in &img[c * PLANE..(c + 1) * PLANE] {
                    hist[b as usize] += 1;
                }
            }
            let m = hist
                .iter()
                .enumerate()
                .map(|(b, &n)| n as f64 * (b as f64 / 255.0))
                .sum::<f64>()
                / count;
            let var = hist
                .iter()
                .enumerate()
                .map(|(b, &n)| n as f64 * (b as f64 / 255.0 - m).powi(2))
                .sum::<f64>()
                / count;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Self { mean, std }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn scale(&self, c: usize) -> f64 {
        if self.std[c] > 1e-12 {
            1.0 / self.std[c]
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    coarse_labels: Vec<u8>,
    fine_labels: Vec<u8>,
    pixels: Vec<u8>,
    stats: ChannelStats,
}

impl Dataset {
    /// Parse CIFAR-100 binary records. Channel statistics are computed from
    /// these records unless `stats` is given.
    pub fn from_bytes(bytes: &[u8], split: Split, stats: Option<ChannelStats>) -> Result<Self> {
        if !bytes.len().is_multiple_of(RECORD_LEN) {
            return Err(Error::invalid(
                "cifar100",
                format!("{} bytes is not a multiple of the {RECORD_LEN}-byte record", bytes.len()),
            ));
        }
        let n = bytes.len() / RECORD_LEN;
        let mut coarse_labels = Vec::with_capacity(n);
        let mut fine_labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
        for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
            if rec[1] as usize >= CLASSES {
                return Err(Error::LabelOutOfRange {
                    row: i,
                    label: rec[1] as usize,
                    classes: CLASSES,
                });
            }
            coarse_labels.push(rec[0]);
            fine_labels.push(rec[1]);
            pixels.extend_from_slice(&rec[2..]);
        }
        let stats = stats.unwrap_or_else(|| ChannelStats::compute(&pixels));
        Ok(Self {
            split,
            coarse_labels,
            fine_labels,
            pixels,
            stats,
        })
    }

    /// Read one split file, checking its length against the record size and,
    /// when `expected_records` is given, the record count.
    pub fn read_file(
        path: impl AsRef<Path>,
        split: Split,
        expected_records: Option<usize>,
        stats: Option<ChannelStats>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingData {
                path: path.to_path_buf(),
            },
            _ => Error::Io(e),
        })?;
        let actual = bytes.len() as u64;
        let records = expected_records.map_or(actual / RECORD_LEN as u64, |n| n as u64);
        let expected = records * RECORD_LEN as u64;
        if actual != expected || actual == 0 {
            return Err(Error::DataLength {
                path: path.to_path_buf(),
                expected: expected.max(RECORD_LEN as u64),
                actual,
                records: records.max(1),
                record_len: RECORD_LEN as u64,
            });
        }
        Self::from_bytes(&bytes, split, stats)
    }

    /// Re-encode as CIFAR-100 binary records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_LEN);
        for i in 0..self.len() {
            out.push(self.coarse_labels[i]);
            out.push(self.fine_labels[i]);
            out.extend_from_slice(self.image_bytes(i));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_labels.is_empty()
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn label(&self, i: usize) -> usize {
        self.fine_labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.fine_labels.iter().map(|&l| l as usize).collect()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Standardized images `[indices.len(), 3, 32, 32]`.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            let img = self.image_bytes(i);
            for c in 0..3 {
                let (m, s) = (self.stats.mean[c], self.stats.scale(c));
                data.extend(
                    img[c * PLANE..(c + 1) * PLANE]
                        .iter()
                        .map(|&b| T::cast((b as f64 / 255.0 - m) * s)),
                );
            }
        }
        Tensor::new([indices.len(), 3, SIDE, SIDE], data).expect("image layout")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// New dataset holding the given records, in order, with the same stats.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Self {
            split: self.split,
            coarse_labels: indices.iter().map(|&i| self.coarse_labels[i]).collect(),
            fine_labels: indices.iter().map(|&i| self.fine_labels[i]).collect(),
            pixels,
            stats: self.stats,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; CLASSES];
        for &l in &self.fine_labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Class-balanced subset with `per_class` records of every fine class
    /// present in the dataset. Records keep their original relative order.
    pub fn subset(&self, per_class: usize, seed: u64) -> Result<Self> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
        for (i, &l) in self.fine_labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(per_class * CLASSES);
        for (class, idx) in by_class.iter_mut().enumerate() {
            if idx.is_empty() {
                continue;
            }
            if idx.len() < per_class {
                return Err(Error::InsufficientClass {
                    class,
                    available: idx.len(),
                    requested: per_class,
                });
            }
            idx.shuffle(&mut rng);
            chosen.extend_from_slice(&idx[..per_class]);
        }
        chosen.sort_unstable();
        Ok(self.select(&chosen))
    }
}

/// Load one split from a directory holding `train.bin` and `test.bin`.
///
/// Standardization uses `stats.json` from the directory when present, and
/// otherwise statistics computed from `train.bin`.
pub fn load_cifar100(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let stats = train_stats(dir)?;
    let expected = match split {
        Split::Train => TRAIN_LEN,
        Split::Test => TEST_LEN,
    };
    Dataset::read_file(dir.join(split.file_name()), split, Some(expected), Some(stats))
}

/// Like [`load_cifar100`] but accepts any whole number of records.
pub fn load_split_any_size(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let stats = train_stats(dir)?;
    Dataset::read_file(dir.join(split.file_name()), split, None, Some(stats))
}

/// Training-split channel statistics for a data directory.
pub fn train_stats(dir: impl AsRef<Path>) -> Result<ChannelStats> {
    let dir = dir.as_ref();
    let sidecar = dir.join(STATS_FILE);
    if sidecar.exists() {
        return ChannelStats::load(sidecar);
    }
    let train = Dataset::read_file(dir.join(Split::Train.file_name()), Split::Train, None, None)?;
    Ok(train.stats())
}

pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("ZCSWISH_DATA_DIR").map(PathBuf::from)
}

/// Shuffling plan for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub epoch: u64,
}

impl BatchPlan {
    /// Seeded permutation of `0..n`; each epoch uses its own generator stream.
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm
    }

    /// Index lists of each batch; the last batch may be short.
    pub fn index_batches(&self, n: usize) -> Vec<Vec<usize>> {
        let size = self.batch_size.max(1);
        self.permutation(n).chunks(size).map(<[usize]>::to_vec).collect()
    }
}

pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Materialize the batches of one epoch lazily.
pub fn batches<'a, T: Scalar>(dataset: &'a Dataset, plan: BatchPlan) -> impl Iterator<Item = Batch<T>> + 'a {
    plan.index_batches(dataset.len()).into_iter().map(move |indices| Batch {
        images: dataset.images(&indices),
        labels: indices.iter().map(|&i| dataset.label(i)).collect(),
        indices,
    })
}

/// Class-structured CIFAR-format records for exercising the pipeline without
/// the real dataset: each class gets a fixed random colour/gradient template
/// and every image is that template plus uniform noise.
pub fn synthetic_records(per_class: usize, classes: usize, seed: u64, noise: u8) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<[(f64, f64, f64); 3]> = (0..classes)
        .map(|_| {
            std::array::from_fn(|_| {
                (
                    rng.random_range(40.0..215.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                )
            })
        })
        .collect();
    let mut out = Vec::with_capacity(per_class * classes * RECORD_LEN);
    for i in 0..per_class * classes {
        let class = i % classes;
        out.push((class % COARSE_CLASSES) as u8);
        out.push(class as u8);
        for &(base, gx, gy) in &templates[class] {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let v = base + gx * (x as f64 / 31.0 - 0.5) + gy * (y as f64 / 31.0 - 0.5);
                    let jitter = if noise == 0 {
                        0.0
                    } else {
                        rng.random_range(-(noise as f64)..=noise as f64)
                    };
                    out.push((v + jitter).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_record_fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (coarse, fine, fill) in [(3u8, 17u8, 0u8), (19, 99, 255)] {
            bytes.push(coarse);
            bytes.push(fine);
            for c in 0..3u8 {
                for p in 0..PLANE {
                    bytes.push(if p == 0 { fill } else { c * 10 + (p % 7) as u8 });
                }
            }
        }
        bytes
    }

    #[test]
    fn parses_fixture_records() {
        let bytes = two_record_fixture();
        let ds = Dataset::from_bytes(&bytes, Split::Train, Some(ChannelStats::IDENTITY)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), vec![17, 99]);
        let img = ds.images::<f64>(&[0, 1]);
        assert_eq!(img.shape(), &[2, 3, 32, 32]);
        // First pixel of every plane of record 1 is byte 255.
        for c in 0..3 {
            assert_eq!(img.data()[IMAGE_BYTES + c * PLANE], 1.0);
        }
        assert_eq!(img.data()[PLANE + 1], (10.0 + 1.0) / 255.0);
        assert_eq!(ds.to_bytes(), bytes);
    }

    #[test]
    fn wrong_length_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        fs::write(&path, vec![0u8; RECORD_LEN * 2 + 5]).unwrap();
        let err = Dataset::read_file(&path, Split::Train, Some(2), None).unwrap_err();
        match err {
            Error::DataLength { expected, actual, .. } => {
                assert_eq!(expected, 2 * RECORD_LEN as u64);
                assert_eq!(actual, 2 * RECORD_LEN as u64 + 5);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_points_at_download() {
        let err = load_cifar100("/nonexistent/cifar", Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/cifar/train.bin"), "{msg}");
        assert!(msg.contains("cs.toronto.edu"), "{msg}");
    }

    #[test]
    fn standardized_moments() {
        let bytes = synthetic_records(3, 10, 5, 30);
        let ds = Dataset::from_bytes(&bytes, Split::Train, None).unwrap();
        let img = ds.images::<f64>(&ds.all_indices());
        for c in 0..3 {
            let vals: Vec<f64> = img
                .data()
                .chunks_exact(PLANE)
                .skip(c)
                .step_by(3)
                .flatten()
                .copied()
                .collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-3, "channel {c} mean {m}");
            assert!((s - 1.0).abs() < 1e-3, "channel {c} std {s}");
        }
    }

    #[test]
    fn subset_is_balanced_and_reproducible() {
        let bytes = synthetic_records(25, CLASSES, 1, 10);
        let ds = Dataset::from_bytes(&bytes, Split::Train, None).unwrap();
        let a = ds.subset(20, 9).unwrap();
        assert_eq!(a.len(), 2000);
        assert!(a.class_counts().iter().all(|&c| c == 20));
        assert_eq!(a, ds.subset(20, 9).unwrap());
        assert_ne!(a, ds.subset(20, 10).unwrap());

        let full = ds.subset(25, 3).unwrap();
        assert_eq!(full, ds);

        let err = ds.subset(26, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientClass { class: 0, available: 25, requested: 26 }));
    }

    #[test]
    fn batch_sizes_and_coverage() {
        let plan = BatchPlan {
            seed: 42,
            batch_size: 128,
            epoch: 0,
        };
        let sizes: Vec<usize> = plan.index_batches(300).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        let mut all: Vec<usize> = plan.index_batches(300).concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_shuffle_differently_but_reproducibly() {
        let p0 = BatchPlan { seed: 7, batch_size: 32, epoch: 0 };
        let p1 = BatchPlan { epoch: 1, ..p0 };
        assert_ne!(p0.permutation(500), p1.permutation(500));
        assert_eq!(p0.permutation(500), p0.permutation(500));
        assert_eq!(p1.permutation(500), p1.permutation(500));
    }

    #[test]
    fn stats_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stats = ChannelStats {
            mean: [0.5, 0.4, 0.3],
            std: [0.2, 0.25, 0.3],
        };
        stats.save(dir.path().join(STATS_FILE)).unwrap();
        assert_eq!(train_stats(dir.path()).unwrap(), stats);
    }
}
