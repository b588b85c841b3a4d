//! Experiment stages: load data, pretrain, synthesize, train from scratch,
//! evaluate, and persist the results.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use bninvert_core::nn::{record_bn_stats, tiny_resnet, Model};
use bninvert_core::rng::derive_seed;
use bninvert_core::synthesis::{assemble_dataset, synthesize_batch, BatchOutcome, LabelScheme, SynthesisConfig, SyntheticDataset};
use bninvert_core::train::{self, train_model, Dataset, TrainConfig};

use crate::error::{Error, Result};
use crate::formats::csv_out::{self, MetricsRow};
use crate::formats::synd::{self, Manifest};
use crate::formats::{ppm, save_checkpoint};

pub const THREADS_ENV: &str = "BNINVERT_THREADS";
pub const CHECKPOINT_FILE: &str = "model.bnck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub train: Option<Dataset<f32>>,
    pub test: Option<Dataset<f32>>,
}

impl LoadedDataset {
    pub fn train(&self) -> Result<&Dataset<f32>> {
        self.train.as_ref().ok_or_else(|| Error::usage("dataset has no train split"))
    }

    pub fn test(&self) -> Result<&Dataset<f32>> {
        self.test.as_ref().ok_or_else(|| Error::usage("dataset has no test split"))
    }
}

/// Applies `(x - mean[c]) / std[c]` to every pixel.
pub fn normalize(data: Dataset<f32>, mean: &[f32], std: &[f32]) -> Result<Dataset<f32>> {
    let [c, h, w] = data.image_shape();
    let plane = h * w;
    let (classes, labels) = (data.class_count(), data.labels().to_vec());
    let mut images = data.images().to_vec();
    for (i, v) in images.iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = (*v - mean[ch]) / std[ch];
    }
    Ok(Dataset::new([c, h, w], classes, images, labels)?)
}

/// Where raw pixels in `[0, 1]` land after the manifest's normalization,
/// widened over channels. A synthesis clip box that keeps images inside the
/// data's own domain.
pub fn pixel_range(manifest: &Manifest) -> (f64, f64) {
    let ends = manifest.norm_mean.iter().zip(&manifest.norm_std).map(|(&m, &s)| ((0.0 - m as f64) / s as f64, (1.0 - m as f64) / s as f64));
    ends.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)))
}

/// Reads a `SYND` dataset (manifest file or its directory) and normalizes
/// every split with the manifest's statistics.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let manifest_path = synd::manifest_path(path);
    let manifest = synd::read_manifest(&manifest_path)?;
    let load = |name: &str| -> Result<Option<Dataset<f32>>> {
        if manifest.split(name).is_none() {
            return Ok(None);
        }
        let raw = synd::read_split(&manifest_path, &manifest, name)?;
        Ok(Some(normalize(raw, &manifest.norm_mean, &manifest.norm_std)?))
    };
    let train = load("train")?;
    let test = load("test")?;
    Ok(LoadedDataset { manifest, manifest_path, train, test })
}

/// `--threads`, then `BNINVERT_THREADS`, then the machine's parallelism.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(Error::usage("thread count must be at least 1"));
    }
    Ok(n)
}

fn check_dims(model: &Model<f32>, data: &Dataset<f32>) -> Result<()> {
    if model.input_shape() != data.image_shape() || model.class_count() != data.class_count() {
        return Err(Error::usage(format!(
            "model expects {:?} inputs and {} classes, dataset has {:?} and {}",
            model.input_shape(),
            model.class_count(),
            data.image_shape(),
            data.class_count()
        )));
    }
    Ok(())
}

pub fn evaluate(model: &Model<f32>, data: &Dataset<f32>) -> Result<f64> {
    check_dims(model, data)?;
    Ok(train::evaluate(model, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Train,
}

/// Weight-init seed for a training stage. The stages draw from different
/// streams, so a student trained with the run seed never starts from the
/// teacher's initial weights.
pub fn init_seed(model_seed: u64, stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => derive_seed(model_seed, 0x7072),
        Stage::Train => derive_seed(model_seed, 0x7472),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutcome {
    /// Test accuracy after the last epoch (`NaN` without an eval split).
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |r| r.test_acc)
    }
}

/// He-initialized TinyResNet trained with SGD and a cosine schedule. The
/// optional eval split is only scored after each epoch.
pub fn train_from_scratch(
    width: usize,
    init_seed: u64,
    cfg: &TrainConfig,
    train_split: &Dataset<f32>,
    eval: Option<&Dataset<f32>>,
) -> Result<TrainOutcome> {
    let mut model = tiny_resnet::<f32>(train_split.image_shape(), width, train_split.class_count(), init_seed)?;
    if let Some(e) = eval {
        check_dims(&model, e)?;
    }
    let mut metrics = Vec::with_capacity(cfg.epochs);
    train_model(&mut model, train_split, cfg, |report, m| {
        let test_acc = match eval {
            Some(e) => train::evaluate(m, e)?,
            None => f64::NAN,
        };
        metrics.push(MetricsRow { epoch: report.epoch, train_loss: report.train_loss, test_acc });
        Ok(())
    })?;
    Ok(TrainOutcome { model, metrics })
}

/// Runs every batch on up to `threads` workers. Output order follows the
/// batch index, so the result does not depend on scheduling.
pub fn synthesize(model: &Model<f32>, cfg: &SynthesisConfig, threads: usize) -> Result<SyntheticDataset<f32>> {
    cfg.validate(model.class_count())?;
    let snapshot = record_bn_stats(model)?;
    let iterations = cfg.iterations();
    let slots: Vec<Mutex<Option<bninvert_core::Result<BatchOutcome<f32>>>>> =
        (0..iterations).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, iterations.max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::Relaxed);
                if b >= iterations {
                    break;
                }
                let out = synthesize_batch(model, &snapshot, cfg, b);
                let failed = out.is_err();
                *slots[b].lock().unwrap() = Some(out);
                if failed {
                    next.store(iterations, Ordering::Relaxed);
                }
            });
        }
    });
    let mut outcomes = Vec::with_capacity(iterations);
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => outcomes.push(r?),
            None => return Err(Error::Core(bninvert_core::Error::InvalidState("batch not run".into()))),
        }
    }
    Ok(assemble_dataset(model, cfg, outcomes)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest for a synthetic dataset, with the generating config and model
/// digest recorded under `provenance.*`.
pub fn synthetic_manifest(ds: &SyntheticDataset<f32>) -> Manifest {
    let mut m = Manifest::new("synthetic", ds.data.class_count(), ds.data.image_shape());
    let c = &ds.provenance.config;
    let mut put = |k: &str, v: String| {
        m.extra.insert(format!("provenance.{k}"), v);
    };
    put("steps", c.steps.to_string());
    put("batch_size", c.batch_size.to_string());
    put("total", c.total.to_string());
    put("iterations", c.iterations().to_string());
    put("lr", c.lr.to_string());
    put("beta1", c.beta1.to_string());
    put("beta2", c.beta2.to_string());
    put("seed", c.seed.to_string());
    let scheme = match c.label_scheme {
        LabelScheme::RoundRobin => "round_robin",
        LabelScheme::RandomBalanced => "random_balanced",
    };
    put("label_scheme", scheme.into());
    put("clip", c.clip.map_or("none".into(), |(lo, hi)| format!("{lo},{hi}")));
    put("match_std", c.match_std.to_string());
    put("bn_weight", c.bn_weight.to_string());
    put("ce_weight", c.ce_weight.to_string());
    put("model_sha256", hex(&ds.provenance.model_digest));
    m.extra.insert("export.normalization".into(), "per_image_min_max".into());
    m
}

/// Writes the dataset, the loss trace and sample images into `dir`.
pub fn write_synthetic(dir: &Path, ds: &SyntheticDataset<f32>, samples_per_class: usize) -> Result<Manifest> {
    let mut manifest = synthetic_manifest(ds);
    synd::write_dataset(dir, &mut manifest, &[("train", &ds.data)])?;
    csv_out::write_trace(&dir.join(TRACE_FILE), &ds.traces)?;
    if samples_per_class > 0 {
        ppm::export_images(&dir.join(SAMPLES_DIR), &ds.data, samples_per_class)?;
    }
    Ok(manifest)
}

/// Writes `model.bnck` and `metrics.csv` into `dir`.
pub fn write_training(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.model)?;
    csv_out::write_metrics(&dir.join(METRICS_FILE), &outcome.metrics)
}
