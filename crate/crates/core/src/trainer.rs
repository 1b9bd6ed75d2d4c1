//! AdamW training loop with per-step and per-epoch metric capture.
//!
//! Nothing in here stabilizes training: the learning rate is constant, there
//! is no warm-up and gradients are never clipped or sanitized. Non-finite
//! losses or gradients are flagged on the step record and training carries on.

use std::fs;
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::config::{AdamWConfig, ExperimentConfig, Precision};
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::plainnet::{Mode, PlainNet};
use crate::probes;

/// AdamW state: first and second moments per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<S: Into<Vec<usize>>>(cfg: AdamWConfig, shapes: impl IntoIterator<Item = S>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| {
                let z = Tensor::zeros(s);
                (z.clone(), z)
            })
            .unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn for_model(cfg: AdamWConfig, model: &PlainNet<T>) -> Self {
        Self::new(cfg, model.params().iter().map(|p| p.spec.shape.clone()))
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[i], &self.v[i])
    }

    /// One update. Each parameter comes with a flag saying whether weight
    /// decay applies to it. Decay scales the parameter by `1 - lr·wd` before
    /// the bias-corrected adaptive step.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (&'p mut Tensor<T>, bool)>,
        grads: &[Tensor<T>],
    ) -> Result<()>
    where
        T: 'p,
    {
        let mut params: Vec<_> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                "parameter count",
                self.m.len(),
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for (i, ((p, _), g)) in params.iter().zip(grads).enumerate() {
            for (what, shape) in [("param", p.shape()), ("grad", g.shape())] {
                if shape != self.m[i].shape() {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("{what} {i}"),
                        format!("{:?}", self.m[i].shape()),
                        format!("{shape:?}"),
                    ));
                }
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let lr = T::cast(c.lr);
        let eps = T::cast(c.eps);
        let decay_factor = T::cast(1.0 - c.lr * c.weight_decay);
        let bc1 = T::cast(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::cast(1.0 - c.beta2.powf(self.step as f64));
        for (i, ((p, decay), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if *decay {
                    *p = *p * decay_factor;
                }
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Update every model parameter; ZC-Swish parameters are decayed only
    /// when `decay_activation_params` is set.
    pub fn step_model(&mut self, model: &mut PlainNet<T>, grads: &[Tensor<T>]) -> Result<()> {
        let decay_act = self.cfg.decay_activation_params;
        let params = model
            .params_mut()
            .iter_mut()
            .map(|p| (&mut p.value, decay_act || !p.spec.role.is_activation()));
        self.step(params, grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Loss or any gradient entry was NaN or infinite.
    pub nonfinite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerStatsRow {
    pub epoch: usize,
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    pub dead_frac: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Best {
    pub train_acc: f64,
    pub train_epoch: usize,
    pub test_acc: f64,
    pub test_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub param_count: usize,
    /// Epoch 0 is the evaluation at initialization.
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub layer_stats: Vec<LayerStatsRow>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    config: &'a ExperimentConfig,
    param_count: usize,
    best: Best,
    initial: Option<&'a EpochMetrics>,
    last: Option<&'a EpochMetrics>,
    steps: usize,
    nonfinite_steps: usize,
}

impl RunRecord {
    /// Best accuracies over the trained epochs (epoch 0 only when no
    /// training happened); ties go to the earliest epoch.
    pub fn best(&self) -> Best {
        let trained: Vec<&EpochMetrics> = match self.epochs.len() {
            0 | 1 => self.epochs.iter().collect(),
            _ => self.epochs[1..].iter().collect(),
        };
        let pick = |f: fn(&EpochMetrics) -> f64| {
            trained
                .iter()
                .fold(None::<(f64, usize)>, |best, e| match best {
                    Some((b, _)) if f(e) <= b => best,
                    _ => Some((f(e), e.epoch)),
                })
                .unwrap_or((f64::NAN, 0))
        };
        let (train_acc, train_epoch) = pick(|e| e.train_acc);
        let (test_acc, test_epoch) = pick(|e| e.test_acc);
        Best {
            train_acc,
            train_epoch,
            test_acc,
            test_epoch,
        }
    }

    pub fn nonfinite_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.nonfinite).count()
    }

    /// `epoch,split,loss,accuracy`, one train and one test row per epoch.
    pub fn write_metrics_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "split", "loss", "accuracy"])?;
        for e in &self.epochs {
            out.serialize((e.epoch, "train", e.train_loss, e.train_acc))?;
            out.serialize((e.epoch, "test", e.test_loss, e.test_acc))?;
        }
        out.flush()?;
        Ok(())
    }

    /// `step,loss,grad_norm,nonfinite_flag`.
    pub fn write_steps_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss", "grad_norm", "nonfinite_flag"])?;
        for s in &self.steps {
            out.serialize((s.step, s.loss, s.grad_norm, u8::from(s.nonfinite)))?;
        }
        out.flush()?;
        Ok(())
    }

    /// `epoch,layer,mean,std,dead_frac,grad_norm`.
    pub fn write_layerstats_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.layer_stats {
            out.serialize(row)?;
        }
        if self.layer_stats.is_empty() {
            out.write_record(["epoch", "layer", "mean", "std", "dead_frac", "grad_norm"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        let summary = RunSummary {
            seed: self.seed,
            config: &self.config,
            param_count: self.param_count,
            best: self.best(),
            initial: self.epochs.first(),
            last: self.epochs.last(),
            steps: self.steps.len(),
            nonfinite_steps: self.nonfinite_steps(),
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }

    /// Write `config.json`, `metrics.csv`, `steps.csv`, `layerstats.csv` and
    /// `summary.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.config.save(dir.join("config.json"))?;
        self.write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?)?;
        self.write_steps_csv(fs::File::create(dir.join("steps.csv"))?)?;
        self.write_layerstats_csv(fs::File::create(dir.join("layerstats.csv"))?)?;
        fs::write(dir.join("summary.json"), self.summary_json() + "\n")?;
        Ok(())
    }
}

/// Index of the largest entry; NaN never wins and ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] || row[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// Number of rows of `[N, K]` logits whose argmax equals the label.
pub fn correct_count<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape().last().copied().unwrap_or(0).max(1);
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    correct_count(logits, labels) as f64 / labels.len() as f64
}

/// Mean cross-entropy and accuracy over a whole dataset, dropout off.
pub fn evaluate<T: Scalar>(model: &PlainNet<T>, dataset: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let n = dataset.len();
    if n == 0 {
        return Ok((f64::NAN, 0.0));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let idx = dataset.all_indices();
    for chunk in idx.chunks(batch_size.max(1)) {
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &dataset.images(chunk), Mode::Eval)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        loss_sum += tape.value(loss).item().expect("scalar loss").as_f64() * chunk.len() as f64;
        correct += correct_count(tape.value(pass.logits), &labels);
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Called with the step number and the parameter gradients before each
/// optimizer update; lets tests inject faults.
pub type GradHook<'a, T> = Box<dyn FnMut(u64, &mut [Tensor<T>]) + 'a>;

pub struct Trainer<'a, T: Scalar> {
    config: &'a ExperimentConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    grad_hook: Option<GradHook<'a, T>>,
    on_epoch: Option<Box<dyn FnMut(&EpochMetrics) + 'a>>,
}

const DROPOUT_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(config: &'a ExperimentConfig, train: &'a Dataset, test: &'a Dataset) -> Self {
        Self {
            config,
            train,
            test,
            grad_hook: None,
            on_epoch: None,
        }
    }

    pub fn with_grad_hook(mut self, hook: impl FnMut(u64, &mut [Tensor<T>]) + 'a) -> Self {
        self.grad_hook = Some(Box::new(hook));
        self
    }

    pub fn on_epoch(mut self, f: impl FnMut(&EpochMetrics) + 'a) -> Self {
        self.on_epoch = Some(Box::new(f));
        self
    }

    /// Train one seed from the default init.
    pub fn run(self, seed: u64) -> Result<RunRecord> {
        self.run_with_model(seed).map(|(r, _)| r)
    }

    pub fn run_with_model(mut self, seed: u64) -> Result<(RunRecord, PlainNet<T>)> {
        let cfg = self.config;
        cfg.validate()?;
        if self.train.is_empty() {
            return Err(Error::config("data", "training split is empty"));
        }
        let mut model = PlainNet::<T>::build(cfg.model.clone(), seed)?;
        let mut opt = AdamW::for_model(cfg.optimizer, &model);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(DROPOUT_STREAM);

        let probe_idx = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(PROBE_STREAM);
            let mut idx = self.train.all_indices();
            idx.shuffle(&mut rng);
            idx.truncate(cfg.probe.batch_size);
            idx.sort_unstable();
            idx
        };
        let probe_images = self.train.images::<T>(&probe_idx);
        let probe_labels: Vec<usize> = probe_idx.iter().map(|&i| self.train.label(i)).collect();

        let mut record = RunRecord {
            seed,
            config: ExperimentConfig {
                seeds: vec![seed],
                ..cfg.clone()
            },
            param_count: model.count_params().total,
            epochs: Vec::with_capacity(cfg.epochs + 1),
            steps: Vec::new(),
            layer_stats: Vec::new(),
        };
        let mut step = 0u64;
        for epoch in 0..=cfg.epochs {
            if epoch > 0 {
                let plan = BatchPlan {
                    seed,
                    batch_size: cfg.batch_size,
                    epoch: epoch as u64,
                };
                for batch in batches::<T>(self.train, plan) {
                    step += 1;
                    let mut tape = Tape::new();
                    let pass = model.forward(&mut tape, &batch.images, Mode::Train(&mut dropout_rng))?;
                    let loss = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
                    let mut g = tape.backward(loss)?;
                    let mut grads: Vec<Tensor<T>> = pass.params.iter().map(|&p| g.take(p)).collect();
                    if let Some(hook) = self.grad_hook.as_mut() {
                        hook(step, &mut grads);
                    }
                    let loss = tape.value(loss).item().expect("scalar loss").as_f64();
                    let grad_norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
                    let nonfinite = !loss.is_finite() || !grads.iter().all(Tensor::all_finite);
                    opt.step_model(&mut model, &grads)?;
                    record.steps.push(StepRecord {
                        step,
                        epoch,
                        loss,
                        grad_norm,
                        nonfinite,
                    });
                }
            }
            let (train_loss, train_acc) = evaluate(&model, self.train, cfg.eval_batch_size)?;
            let (test_loss, test_acc) = evaluate(&model, self.test, cfg.eval_batch_size)?;
            let metrics = EpochMetrics {
                epoch,
                train_loss,
                train_acc,
                test_loss,
                test_acc,
            };
            if let Some(f) = self.on_epoch.as_mut() {
                f(&metrics);
            }
            record.epochs.push(metrics);
            if cfg.probe.enabled {
                let stats = probes::layer_stats(&model, &probe_images, &probe_labels, cfg.probe.dead_threshold)?;
                record.layer_stats.extend(stats.into_iter().map(|s| LayerStatsRow {
                    epoch,
                    layer: s.layer,
                    mean: s.mean,
                    std: s.std,
                    dead_frac: s.dead_frac,
                    grad_norm: s.grad_norm,
                }));
            }
        }
        Ok((record, model))
    }
}

/// Sample mean and sample (n - 1) standard deviation; std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

impl Aggregate {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let best: Vec<Best> = records.iter().map(RunRecord::best).collect();
        let train: Vec<f64> = best.iter().map(|b| b.train_acc).collect();
        let test: Vec<f64> = best.iter().map(|b| b.test_acc).collect();
        let (train_mean, train_std) = mean_std(&train);
        let (test_mean, test_std) = mean_std(&test);
        Self {
            runs: records.len(),
            train_mean,
            train_std,
            test_mean,
            test_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiSeedReport {
    pub records: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

impl MultiSeedReport {
    pub fn table_header() -> String {
        format!(
            "{:<10} {:>12}  {:>16}  {:>16}",
            "Activation", "Total Params", "Best Train Acc.", "Best Test Acc."
        )
    }

    /// One table line: activation, parameter count, then mean ± std of the
    /// best-epoch accuracies in percent.
    pub fn table_row(&self) -> String {
        let a = &self.aggregate;
        let (act, params) = self
            .records
            .first()
            .map_or((String::new(), 0), |r| (r.config.model.activation.to_string(), r.param_count));
        format!(
            "{:<10} {:>12}  {:>16}  {:>16}",
            act,
            crate::plainnet::group_thousands(params),
            format!("{:.2} ± {:.2}", 100.0 * a.train_mean, 100.0 * a.train_std),
            format!("{:.2} ± {:.2}", 100.0 * a.test_mean, 100.0 * a.test_std),
        )
    }

    /// Per-seed run directories `seed-<s>/` plus `aggregate.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for r in &self.records {
            r.write_dir(dir.join(format!("seed-{}", r.seed)))?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            seeds: Vec<u64>,
            aggregate: &'a Aggregate,
            best: Vec<Best>,
            table_row: String,
        }
        let out = Out {
            seeds: self.records.iter().map(|r| r.seed).collect(),
            aggregate: &self.aggregate,
            best: self.records.iter().map(RunRecord::best).collect(),
            table_row: self.table_row(),
        };
        fs::write(
            dir.join("aggregate.json"),
            serde_json::to_string_pretty(&out).expect("aggregate serializes") + "\n",
        )?;
        Ok(())
    }
}

/// Run every seed in `config.seeds`, using up to `jobs` threads. Records come
/// back in seed-list order whatever the scheduling.
pub fn multi_seed<T: Scalar>(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    jobs: usize,
    progress: &(dyn Fn(u64, &EpochMetrics) + Sync),
) -> Result<MultiSeedReport> {
    config.validate()?;
    let jobs = jobs.clamp(1, config.seeds.len());
    let mut slots: Vec<Option<Result<RunRecord>>> = (0..config.seeds.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..jobs {
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for (i, &seed) in config.seeds.iter().enumerate().skip(worker).step_by(jobs) {
                    let r = Trainer::<T>::new(config, train, test)
                        .on_epoch(|m| progress(seed, m))
                        .run(seed);
                    out.push((i, r));
                }
                out
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("training thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let records = slots
        .into_iter()
        .map(|s| s.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiSeedReport {
        aggregate: Aggregate::from_records(&records),
        records,
    })
}

/// [`multi_seed`] at the precision named in the config.
pub fn run_experiment(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    jobs: usize,
    progress: &(dyn Fn(u64, &EpochMetrics) + Sync),
) -> Result<MultiSeedReport> {
    match config.precision {
        Precision::F32 => multi_seed::<f32>(config, train, test, jobs, progress),
        Precision::F64 => multi_seed::<f64>(config, train, test, jobs, progress),
    }
}
