//! Statistics-matching synthesis.
//!
//! Each batch starts as standard-normal noise with fixed labels and is
//! optimized with Adam to minimize
//!
//! ```text
//! sum_i |mean_i(x) - mu_i|^2 + |var_i(x) - sigma_i|^2  +  CE(labels, model(x))
//! ```
//!
//! where `mean_i`/`var_i` are the batch moments of the input to BatchNorm
//! layer `i`, `mu_i`/`sigma_i` its recorded running mean and variance, and
//! the model normalizes with its running statistics throughout (`SynthEval`).
//! The model is borrowed immutably and never changes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{checkpoint, BnStatsSnapshot, Mode, Model, DEFAULT_EPS};
use crate::optim::Adam;
use crate::real::Real;
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;
use crate::train::Dataset;

const LABEL_STREAM: u64 = 0x1abe1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelScheme {
    /// Sample `j` gets class `j mod C`.
    RoundRobin,
    /// The round-robin multiset, shuffled per batch with a seeded permutation.
    RandomBalanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    /// Optimization steps per batch (`k`).
    pub steps: usize,
    pub batch_size: usize,
    /// Total number of synthetic images (`N`); must be a multiple of `batch_size`.
    /// The default matches the fixture's training split size.
    pub total: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub label_scheme: LabelScheme,
    /// Clamp pixels into `[min, max]` after every step.
    pub clip: Option<(f64, f64)>,
    /// Compare standard deviations instead of variances.
    pub match_std: bool,
    pub bn_weight: f64,
    pub ce_weight: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            steps: 200,
            batch_size: 100,
            total: 2000,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            label_scheme: LabelScheme::RoundRobin,
            clip: None,
            match_std: false,
            bn_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

impl SynthesisConfig {
    /// CIFAR-scale settings: 50000 images in batches of 250.
    pub fn reference_scale(steps: usize) -> Self {
        SynthesisConfig {
            steps,
            batch_size: 250,
            total: 50_000,
            ..Self::default()
        }
    }

    /// Number of batches, `total / batch_size`.
    pub fn iterations(&self) -> usize {
        self.total / self.batch_size.max(1)
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::arg("synthesis needs at least one step per batch"));
        }
        if self.batch_size == 0 || self.total == 0 || self.total % self.batch_size != 0 {
            return Err(Error::arg(format!(
                "total images ({}) must be a positive multiple of the batch size ({})",
                self.total, self.batch_size
            )));
        }
        if self.batch_size < class_count {
            return Err(Error::arg(format!(
                "batch size {} is smaller than the class count {class_count}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::arg("synthesis needs lr > 0 and betas in [0, 1)"));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) {
                return Err(Error::arg(format!("clip range [{lo}, {hi}] is empty")));
            }
        }
        if !(self.bn_weight >= 0.0) || !(self.ce_weight >= 0.0) {
            return Err(Error::arg("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Standard-normal starting point for batch `batch_index`.
pub fn init_noise<T: Real>(config: &SynthesisConfig, image_shape: [usize; 3], batch_index: usize) -> Result<Tensor<T>> {
    let [c, h, w] = image_shape;
    Tensor::randn(
        &[config.batch_size, c, h, w],
        0.0,
        1.0,
        derive_seed(config.seed, batch_index as u64),
    )
}

pub fn assign_labels(config: &SynthesisConfig, class_count: usize, batch_index: usize) -> Result<Vec<usize>> {
    if class_count == 0 || config.batch_size < class_count {
        return Err(Error::arg(format!(
            "cannot balance {class_count} classes over a batch of {}",
            config.batch_size
        )));
    }
    let mut labels: Vec<usize> = (0..config.batch_size).map(|j| j % class_count).collect();
    if config.label_scheme == LabelScheme::RandomBalanced {
        let seed = derive_seed(config.seed ^ LABEL_STREAM, batch_index as u64);
        CounterRng::new(seed).shuffle(&mut labels);
    }
    Ok(labels)
}

/// Values of the loss terms after weighting; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub bn_mean: f64,
    pub bn_var: f64,
    pub ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub match_std: bool,
    pub bn_weight: f64,
    pub ce_weight: f64,
    /// Added to both variances before taking square roots when `match_std`.
    pub std_eps: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            match_std: false,
            bn_weight: 1.0,
            ce_weight: 1.0,
            std_eps: DEFAULT_EPS,
        }
    }
}

impl From<&SynthesisConfig> for LossOptions {
    fn from(c: &SynthesisConfig) -> Self {
        LossOptions {
            match_std: c.match_std,
            bn_weight: c.bn_weight,
            ce_weight: c.ce_weight,
            ..LossOptions::default()
        }
    }
}

/// Mean cross-entropy of `[N, C]` logits against `labels`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, labels)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -T::one()))
}

/// Builds the statistics-matching loss into `g` from the per-layer batch
/// moments of a `SynthEval` forward pass.
pub fn matching_loss<T: Real>(
    g: &mut Graph<T>,
    bn_batch_stats: &[(Var, Var)],
    snapshot: &BnStatsSnapshot<T>,
    logits: Var,
    labels: &[usize],
    opts: &LossOptions,
) -> Result<(Var, LossBreakdown)> {
    if bn_batch_stats.len() != snapshot.len() {
        return Err(Error::arg(format!(
            "{} BatchNorm layers in the forward pass, {} in the snapshot",
            bn_batch_stats.len(),
            snapshot.len()
        )));
    }
    let zero = g.constant(&[], alloc::vec![T::zero()])?;
    let (mut mean_term, mut var_term) = (zero, zero);
    let eps = T::from_f64(opts.std_eps);
    for (i, (&(m, v), rec)) in bn_batch_stats.iter().zip(snapshot.layers()).enumerate() {
        if g.shape(m) != [rec.mean.len()] || g.shape(v) != [rec.var.len()] {
            return Err(Error::arg(format!(
                "BatchNorm layer {i}: batch stats {:?} vs recorded {} channels",
                g.shape(m),
                rec.mean.len()
            )));
        }
        let c = rec.mean.len();
        let mu = g.constant(&[c], rec.mean.clone())?;
        let dm = g.sub(m, mu)?;
        let dm2 = g.square(dm);
        let sm = g.sum(dm2);
        mean_term = g.add(mean_term, sm)?;

        let (ours, target) = if opts.match_std {
            let shifted = g.add_scalar(v, eps);
            let sd = g.sqrt(shifted);
            let rec_sd = rec.var.iter().map(|&x| (x + eps).sqrt()).collect();
            (sd, g.constant(&[c], rec_sd)?)
        } else {
            (v, g.constant(&[c], rec.var.clone())?)
        };
        let dv = g.sub(ours, target)?;
        let dv2 = g.square(dv);
        let sv = g.sum(dv2);
        var_term = g.add(var_term, sv)?;
    }
    let ce = cross_entropy(g, logits, labels)?;

    let bn_w = T::from_f64(opts.bn_weight);
    let mean_term = g.scale(mean_term, bn_w);
    let var_term = g.scale(var_term, bn_w);
    let ce = g.scale(ce, T::from_f64(opts.ce_weight));
    let bn = g.add(mean_term, var_term)?;
    let total = g.add(bn, ce)?;
    let breakdown = LossBreakdown {
        bn_mean: g.scalar(mean_term).as_f64(),
        bn_var: g.scalar(var_term).as_f64(),
        ce: g.scalar(ce).as_f64(),
        total: g.scalar(total).as_f64(),
    };
    Ok((total, breakdown))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch<T> {
    /// `[b_s, C, H, W]`, detached from any graph.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome<T> {
    pub batch: SyntheticBatch<T>,
    /// Loss at each step, evaluated before that step's update.
    pub trace: Vec<LossBreakdown>,
}

fn check_layout<T: Real>(model: &Model<T>, snapshot: &BnStatsSnapshot<T>) -> Result<()> {
    let bns = model.bn_layers();
    if bns.len() != snapshot.len() || bns.iter().zip(snapshot.layers()).any(|(b, s)| b.channels() != s.mean.len()) {
        return Err(Error::arg("model BatchNorm layout does not match the snapshot"));
    }
    Ok(())
}

/// Optimizes one noise batch for `config.steps` Adam steps.
pub fn synthesize_batch<T: Real>(
    model: &Model<T>,
    snapshot: &BnStatsSnapshot<T>,
    config: &SynthesisConfig,
    batch_index: usize,
) -> Result<BatchOutcome<T>> {
    config.validate(model.class_count())?;
    check_layout(model, snapshot)?;
    let labels = assign_labels(config, model.class_count(), batch_index)?;
    let mut x = init_noise::<T>(config, model.input_shape(), batch_index)?.with_grad(true);
    let mut adam = Adam::<T>::new(config.lr, config.beta1, config.beta2)?;
    let opts = LossOptions::from(config);
    let clip = config.clip.map(|(lo, hi)| (T::from_f64(lo), T::from_f64(hi)));
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let fwd = model.forward_frozen(&mut g, xv, Mode::SynthEval)?;
        let (loss, breakdown) = matching_loss(&mut g, &fwd.bn_stats, snapshot, fwd.logits, &labels, &opts)?;
        let grads = g.backward(loss)?;
        x.zero_grad();
        grads.accumulate_into(xv, &mut x)?;
        adam.step(&mut [&mut x])?;
        if let Some((lo, hi)) = clip {
            x.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
        trace.push(breakdown);
    }
    x.set_requires_grad(false);
    Ok(BatchOutcome {
        batch: SyntheticBatch { images: x, labels },
        trace,
    })
}

/// Where a synthetic dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config: SynthesisConfig,
    /// SHA-256 of the model's `BNCK` encoding.
    pub model_digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<T> {
    pub data: Dataset<T>,
    pub provenance: Provenance,
    /// Per-batch loss traces, in batch order.
    pub traces: Vec<Vec<LossBreakdown>>,
}

/// Concatenates batch outcomes (in batch-index order) into a dataset.
pub fn assemble_dataset<T: Real>(
    model: &Model<T>,
    config: &SynthesisConfig,
    outcomes: Vec<BatchOutcome<T>>,
) -> Result<SyntheticDataset<T>> {
    if outcomes.len() != config.iterations() {
        return Err(Error::arg(format!(
            "expected {} batches, got {}",
            config.iterations(),
            outcomes.len()
        )));
    }
    let mut images = Vec::with_capacity(config.total * model.input_shape().iter().product::<usize>());
    let mut labels = Vec::with_capacity(config.total);
    let mut traces = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        images.extend_from_slice(o.batch.images.data());
        labels.extend(o.batch.labels.iter().map(|&l| l as u16));
        traces.push(o.trace);
    }
    let data = Dataset::new(model.input_shape(), model.class_count(), images, labels)?;
    Ok(SyntheticDataset {
        data,
        provenance: Provenance {
            config: config.clone(),
            model_digest: checkpoint::model_digest(&model.cast::<f32>()),
        },
        traces,
    })
}

/// Runs every batch in order and assembles the dataset.
pub fn generate_dataset<T: Real>(
    model: &Model<T>,
    snapshot: &BnStatsSnapshot<T>,
    config: &SynthesisConfig,
) -> Result<SyntheticDataset<T>> {
    config.validate(model.class_count())?;
    let outcomes = (0..config.iterations())
        .map(|b| synthesize_batch(model, snapshot, config, b))
        .collect::<Result<Vec<_>>>()?;
    assemble_dataset(model, config, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn round_robin_labels() {
        let cfg = SynthesisConfig {
            batch_size: 6,
            total: 6,
            ..Default::default()
        };
        assert_eq!(assign_labels(&cfg, 3, 0).unwrap(), vec![0, 1, 2, 0, 1, 2]);
        let cfg = SynthesisConfig::reference_scale(250);
        let l = assign_labels(&cfg, 10, 0).unwrap();
        for c in 0..10 {
            assert_eq!(l.iter().filter(|&&x| x == c).count(), 25);
        }
    }

    #[test]
    fn random_balanced_is_seeded() {
        let cfg = SynthesisConfig {
            batch_size: 20,
            total: 40,
            label_scheme: LabelScheme::RandomBalanced,
            seed: 3,
            ..Default::default()
        };
        let a = assign_labels(&cfg, 4, 1).unwrap();
        assert_eq!(a, assign_labels(&cfg, 4, 1).unwrap());
        assert_ne!(a, assign_labels(&cfg, 4, 0).unwrap());
        for c in 0..4 {
            assert_eq!(a.iter().filter(|&&x| x == c).count(), 5);
        }
    }

    #[test]
    fn labels_need_batch_at_least_class_count() {
        let cfg = SynthesisConfig {
            batch_size: 3,
            total: 3,
            ..Default::default()
        };
        assert!(matches!(assign_labels(&cfg, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn noise_depends_on_batch_index() {
        let cfg = SynthesisConfig::default();
        let a = init_noise::<f32>(&cfg, [3, 4, 4], 0).unwrap();
        assert_eq!(a, init_noise::<f32>(&cfg, [3, 4, 4], 0).unwrap());
        assert_ne!(a, init_noise::<f32>(&cfg, [3, 4, 4], 1).unwrap());
        assert_eq!(a.shape(), &[100, 3, 4, 4]);
    }

    #[test]
    fn noise_moments() {
        let cfg = SynthesisConfig {
            batch_size: 100,
            ..Default::default()
        };
        let t = init_noise::<f64>(&cfg, [1, 10, 10], 7).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05 && var > 0.9 && var < 1.1, "{mean} {var}");
    }

    #[test]
    fn config_validation() {
        let ok = SynthesisConfig::default();
        assert!(ok.validate(4).is_ok());
        assert!(SynthesisConfig { steps: 0, ..ok.clone() }.validate(4).is_err());
        assert!(SynthesisConfig { total: 150, ..ok.clone() }.validate(4).is_err());
        assert!(SynthesisConfig { batch_size: 2, total: 4, ..ok.clone() }.validate(4).is_err());
        assert!(SynthesisConfig { clip: Some((1.0, -1.0)), ..ok }.validate(4).is_err());
        let reference = SynthesisConfig::reference_scale(1000);
        assert_eq!(reference.iterations(), 200);
        assert!(reference.validate(10).is_ok());
    }
}
