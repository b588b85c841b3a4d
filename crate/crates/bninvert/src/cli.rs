//! `bninvert` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{load_checkpoint, synd};
use crate::{fixture, pipeline};

#[derive(Debug, Parser)]
#[command(name = "bninvert", version, about = "Synthesize training data from a model's BatchNorm statistics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed routed into every stage; overrides the config file
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
    /// Worker thread cap (falls back to BNINVERT_THREADS)
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural shape dataset
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a TinyResNet on real data
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic dataset from a checkpoint's BatchNorm statistics
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optimization steps per batch
        #[arg(long)]
        k: Option<usize>,
        /// Total number of synthetic images
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Clip pixels to the normalized `[0, 1]` range of this dataset
        #[arg(long, value_name = "DATA")]
        clip_data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a fresh model on a dataset (typically a synthetic one)
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset whose test split is scored after every epoch
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Report top-1 accuracy of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::usage(format!("{} is not empty (use --force)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let say = |out: &mut dyn Write, line: String| out.write_all(format!("{line}\n").as_bytes()).map_err(|e| Error::io("<stdout>", e));
    match cli.command {
        Command::MakeFixture { out: dir, common } => {
            let cfg = resolve_config(&common)?;
            cfg.validate()?;
            prepare_out(&dir, common.force)?;
            let d = &cfg.dataset;
            fixture::write_fixture(&dir, d.seed, d.train_size, d.test_size)?;
            cfg.write_resolved(&dir)?;
            say(out, format!("wrote fixture to {} ({} train, {} test)", dir.display(), d.train_size, d.test_size))?;
        }
        Command::Pretrain { data, out: dir, common } => {
            let cfg = resolve_config(&common)?;
            cfg.validate()?;
            let ds = pipeline::load_dataset(&data)?;
            prepare_out(&dir, common.force)?;
            let outcome = pipeline::train_from_scratch(
                cfg.model.width,
                pipeline::init_seed(cfg.model.seed, pipeline::Stage::Pretrain),
                &cfg.pretrain.to_config(),
                ds.train()?,
                ds.test.as_ref(),
            )?;
            pipeline::write_training(&dir, &outcome)?;
            cfg.write_resolved(&dir)?;
            say(out, format!("top1={}", outcome.final_accuracy()))?;
        }
        Command::Synthesize { checkpoint, out: dir, k, n, batch_size, clip_data, common } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(k) = k {
                cfg.synthesis.steps = k;
            }
            if let Some(n) = n {
                cfg.synthesis.total = n;
            }
            if let Some(b) = batch_size {
                cfg.synthesis.batch_size = b;
            }
            if let Some(data) = clip_data {
                let (lo, hi) = pipeline::pixel_range(&synd::read_manifest(&synd::manifest_path(&data))?);
                cfg.synthesis.clip_min = Some(lo);
                cfg.synthesis.clip_max = Some(hi);
            }
            cfg.validate()?;
            let threads = pipeline::resolve_threads(common.threads)?;
            let model = load_checkpoint(&checkpoint)?;
            prepare_out(&dir, common.force)?;
            let ds = pipeline::synthesize(&model, &cfg.synthesis.to_config()?, threads)?;
            pipeline::write_synthetic(&dir, &ds, cfg.output.samples_per_class)?;
            cfg.write_resolved(&dir)?;
            let last: Vec<f64> = ds.traces.iter().filter_map(|t| t.last().map(|b| b.total)).collect();
            let mean = last.iter().sum::<f64>() / last.len().max(1) as f64;
            say(out, format!("wrote {} images to {} (mean final loss {mean})", ds.data.len(), dir.display()))?;
        }
        Command::Train { data, out: dir, eval_data, common } => {
            let cfg = resolve_config(&common)?;
            cfg.validate()?;
            let ds = pipeline::load_dataset(&data)?;
            let eval = eval_data.as_deref().map(pipeline::load_dataset).transpose()?;
            let eval_split = eval.as_ref().map(|e| e.test()).transpose()?;
            prepare_out(&dir, common.force)?;
            let outcome = pipeline::train_from_scratch(
                cfg.model.width,
                pipeline::init_seed(cfg.model.seed, pipeline::Stage::Train),
                &cfg.train.to_config(),
                ds.train()?,
                eval_split,
            )?;
            pipeline::write_training(&dir, &outcome)?;
            cfg.write_resolved(&dir)?;
            if eval_split.is_some() {
                say(out, format!("top1={}", outcome.final_accuracy()))?;
            } else {
                say(out, format!("wrote {}", dir.join(pipeline::CHECKPOINT_FILE).display()))?;
            }
        }
        Command::Eval { checkpoint, data, split } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = pipeline::load_dataset(&data)?;
            let part = match split.as_str() {
                "train" => ds.train()?,
                "test" => ds.test()?,
                other => return Err(Error::usage(format!("unknown split {other:?}"))),
            };
            say(out, format!("top1={}", pipeline::evaluate(&model, part)?))?;
        }
    }
    eprintln!("elapsed {:.2}s", started.elapsed().as_secs_f64());
    Ok(())
}
