//! Experiment configuration: everything needed to replay a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::plainnet::{Depth, PlainNetConfig};
use crate::probes::DEAD_THRESHOLD;

pub const SCHEMA_VERSION: u32 = 1;
pub const PAPER_SEEDS: [u64; 3] = [42, 0, 12345];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply weight decay to the ZC-Swish `(c, β_raw, g)` parameters too.
    pub decay_activation_params: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_activation_params: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CIFAR-100 binary files; `dir` falls back to `ZCSWISH_DATA_DIR`.
    Cifar100 { dir: Option<PathBuf> },
    /// Generated class-template images in CIFAR format.
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
        noise: u8,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Balanced per-class subset of the training split; `None` keeps all.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Seed of the subset draw, shared by every training seed.
    pub subset_seed: u64,
}

impl DataConfig {
    pub fn cifar(dir: Option<PathBuf>) -> Self {
        Self {
            source: DataSource::Cifar100 { dir },
            train_per_class: None,
            test_per_class: None,
            subset_seed: 42,
        }
    }

    /// Resolved data directory for the CIFAR source.
    pub fn resolve_dir(&self) -> Option<PathBuf> {
        match &self.source {
            DataSource::Cifar100 { dir } => dir.clone().or_else(data::data_dir_from_env),
            DataSource::Synthetic { .. } => None,
        }
    }

    /// Load train and test splits, applying the configured subsets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.source {
            DataSource::Cifar100 { .. } => {
                let dir = self.resolve_dir().ok_or_else(|| Error::MissingData {
                    path: PathBuf::from("$ZCSWISH_DATA_DIR"),
                })?;
                (
                    data::load_split_any_size(&dir, Split::Train)?,
                    data::load_split_any_size(&dir, Split::Test)?,
                )
            }
            &DataSource::Synthetic {
                train_per_class,
                test_per_class,
                seed,
                noise,
            } => {
                // One pool so both splits share the class templates; records
                // cycle through the classes, so a prefix is balanced.
                let per_class = train_per_class + test_per_class;
                let pool = data::synthetic_records(per_class, data::CLASSES, seed, noise);
                let (tr, te) = pool.split_at(train_per_class * data::CLASSES * data::RECORD_LEN);
                let train = Dataset::from_bytes(tr, Split::Train, None)?;
                let stats = train.stats();
                (train, Dataset::from_bytes(te, Split::Test, Some(stats))?)
            }
        };
        let train = match self.train_per_class {
            Some(k) => train.subset(k, self.subset_seed)?,
            None => train,
        };
        let test = match self.test_per_class {
            Some(k) => test.subset(k, self.subset_seed)?,
            None => test,
        };
        Ok((train, test))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub batch_size: usize,
    pub dead_threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            batch_size: 256,
            dead_threshold: DEAD_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: PlainNetConfig,
    pub data: DataConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batch size for evaluation passes; does not affect results.
    pub eval_batch_size: usize,
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
    pub precision: Precision,
}

/// The training-regime features a config turns on. Every run uses a constant
/// learning rate, unclipped gradients and the default uniform init; this is
/// what the audit checks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Regime {
    pub gradient_clipping: bool,
    pub warmup_steps: usize,
    pub lr_schedule: &'static str,
    pub init: &'static str,
    pub normalization_layers: usize,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, activation: ActivationKind) -> Self {
        match preset {
            Preset::Paper => Self {
                schema_version: SCHEMA_VERSION,
                model: PlainNetConfig::new(Depth::D16, activation),
                data: DataConfig::cifar(None),
                optimizer: AdamWConfig::default(),
                epochs: 30,
                batch_size: 128,
                eval_batch_size: 256,
                seeds: PAPER_SEEDS.to_vec(),
                probe: ProbeConfig::default(),
                output_dir: PathBuf::from("runs").join(activation.slug()),
                precision: Precision::F32,
            },
            Preset::Desk => {
                let mut cfg = Self::preset(Preset::Paper, activation);
                cfg.model = PlainNetConfig::new(Depth::D8, activation).with_width_divisor(8);
                cfg.data.train_per_class = Some(20);
                cfg.data.test_per_class = Some(10);
                cfg.epochs = 5;
                cfg.batch_size = 32;
                cfg.seeds = vec![42];
                cfg
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive and finite"));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.probe.batch_size == 0 {
            return Err(Error::config("probe.batch_size", "must be positive"));
        }
        if !(self.probe.dead_threshold >= 0.0) {
            return Err(Error::config("probe.dead_threshold", "must be non-negative"));
        }
        if let Some(0) = self.data.train_per_class {
            return Err(Error::config("data.train_per_class", "must be positive"));
        }
        if let Some(0) = self.data.test_per_class {
            return Err(Error::config("data.test_per_class", "must be positive"));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        Regime {
            gradient_clipping: false,
            warmup_steps: 0,
            lr_schedule: "constant",
            init: "uniform_fan_in",
            normalization_layers: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
