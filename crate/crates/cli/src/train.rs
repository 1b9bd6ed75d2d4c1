//! `train`: build the effective config from a preset or file plus flags, then
//! run every seed.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::ValueEnum;

use zcswish_core::config::{DataSource, ExperimentConfig, Precision, Preset};
use zcswish_core::plainnet::{Depth, PlainNetConfig};
use zcswish_core::trainer::{run_experiment, EpochMetrics, MultiSeedReport};
use zcswish_core::ActivationKind;

#[derive(Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// JSON config; flags given alongside override its values.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum, default_value = "paper")]
    preset: PresetArg,
    #[arg(long)]
    activation: Option<ActivationKind>,
    /// 8, 16 or 32 weight layers.
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Whether weight decay also applies to ZC-Swish parameters.
    #[arg(long)]
    decay_activation_params: Option<bool>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Balanced training subset size per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    subset_seed: Option<u64>,
    /// Directory with train.bin and test.bin.
    #[arg(long, env = "ZCSWISH_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Train on generated class-template images instead of CIFAR-100.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    no_probes: bool,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

/// Flags over the file or preset; the result is what gets saved.
pub fn effective_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let from_file = args.config.is_some();
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let preset = match args.preset {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            };
            ExperimentConfig::preset(preset, args.activation.unwrap_or(ActivationKind::ZcSwish))
        }
    };
    if let Some(a) = args.activation {
        cfg.model.activation = a;
    }
    if let Some(d) = args.depth {
        let depth = Depth::try_from(d)?;
        let fresh = PlainNetConfig::new(depth, cfg.model.activation);
        cfg.model = PlainNetConfig {
            depth,
            channel_progression: fresh.channel_progression,
            pool_after: fresh.pool_after,
            ..cfg.model.clone()
        };
    }
    if let Some(w) = args.width_divisor {
        cfg.model.width_divisor = w;
    }
    if let Some(p) = args.dropout {
        cfg.model.dropout_p = p;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(wd) = args.weight_decay {
        cfg.optimizer.weight_decay = wd;
    }
    if let Some(d) = args.decay_activation_params {
        cfg.optimizer.decay_activation_params = d;
    }
    if let Some(k) = args.per_class {
        cfg.data.train_per_class = Some(k);
    }
    if let Some(k) = args.test_per_class {
        cfg.data.test_per_class = Some(k);
    }
    if let Some(s) = args.subset_seed {
        cfg.data.subset_seed = s;
    }
    if args.synthetic {
        cfg.data.source = DataSource::Synthetic {
            train_per_class: cfg.data.train_per_class.unwrap_or(20),
            test_per_class: cfg.data.test_per_class.unwrap_or(10),
            seed: cfg.data.subset_seed,
            noise: 64,
        };
    } else if let (DataSource::Cifar100 { dir }, Some(d)) = (&mut cfg.data.source, &args.data_dir) {
        *dir = Some(d.clone());
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if args.no_probes {
        cfg.probe.enabled = false;
    }
    match &args.output {
        Some(o) => cfg.output_dir = o.clone(),
        None if !from_file => cfg.output_dir = PathBuf::from("runs").join(cfg.model.activation.slug()),
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: TrainArgs) -> Result<ExitCode> {
    let cfg = effective_config(&args)?;
    let (train, test) = cfg.data.load()?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    cfg.save(cfg.output_dir.join("config.json"))?;
    eprintln!(
        "training {} depth {} width/{} on {} train / {} test images, seeds {:?}",
        cfg.model.activation,
        cfg.model.depth,
        cfg.model.width_divisor,
        train.len(),
        test.len(),
        cfg.seeds
    );
    let quiet = args.quiet;
    let progress = move |seed: u64, m: &EpochMetrics| {
        if !quiet {
            eprintln!(
                "seed {seed} epoch {:>3}  train loss {:.4} acc {:6.2}%  test loss {:.4} acc {:6.2}%",
                m.epoch,
                m.train_loss,
                100.0 * m.train_acc,
                m.test_loss,
                100.0 * m.test_acc
            );
        }
    };
    let report = run_experiment(&cfg, &train, &test, args.jobs, &progress)?;
    report.write_dir(&cfg.output_dir)?;
    let flagged: usize = report.records.iter().map(|r| r.nonfinite_steps()).sum();
    if flagged > 0 {
        eprintln!("{flagged} steps had non-finite loss or gradients");
    }
    println!("{}", MultiSeedReport::table_header());
    println!("{}", report.table_row());
    Ok(ExitCode::SUCCESS)
}
