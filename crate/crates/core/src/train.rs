//! In-memory datasets, supervised training and top-1 evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Mode, Model};
use crate::optim::{sgd_step, CosineSchedule};
use crate::real::Real;
use crate::rng::{derive_seed, CounterRng};
use crate::synthesis::cross_entropy;
use crate::tensor::Tensor;

/// Images stored image-major as `[N, C, H, W]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    image_shape: [usize; 3],
    class_count: usize,
    images: Vec<T>,
    labels: Vec<u16>,
}

impl<T: Real> Dataset<T> {
    pub fn new(image_shape: [usize; 3], class_count: usize, images: Vec<T>, labels: Vec<u16>) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} values for {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::arg(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Dataset {
            image_shape,
            class_count,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn images(&self) -> &[T] {
        &self.images
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[T] {
        let per = self.image_shape.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the given samples into a `[n, C, H, W]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.image_shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        let x = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch length is exact");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.class_count];
        self.labels.iter().for_each(|&l| counts[l as usize] += 1);
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub eta_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            eta_min: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 200 epochs, batch 128, lr 0.1 annealed to 0.
    pub fn reference_scale() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.lr, self.eta_min, self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("training needs epochs >= 1 and batch_size >= 1"));
        }
        if !(self.lr >= 0.0) || !(self.eta_min >= 0.0) {
            return Err(Error::arg("learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// Per-epoch summary handed to the training callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch cross-entropy over the epoch.
    pub train_loss: f64,
}

fn check_compat<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<()> {
    if model.input_shape() != data.image_shape() || model.class_count() != data.class_count() {
        return Err(Error::shape(format!(
            "model takes {:?} with {} classes, dataset has {:?} with {} classes",
            model.input_shape(),
            model.class_count(),
            data.image_shape(),
            data.class_count()
        )));
    }
    Ok(())
}

/// Mini-batch SGD on cross-entropy with a per-epoch cosine learning rate.
///
/// Samples are reshuffled every epoch from `config.seed`; a trailing batch
/// of a single sample is skipped. `on_epoch` runs after every epoch with
/// read-only access to the model.
pub fn train_model<T: Real>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    check_compat(model, train)?;
    let schedule = config.schedule();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        CounterRng::new(derive_seed(config.seed, epoch as u64)).shuffle(&mut order);
        let lr = schedule.lr(epoch);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk);
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let fwd = model.forward(&mut g, xv, Mode::Train)?;
            let loss = cross_entropy(&mut g, fwd.logits, &labels)?;
            loss_sum += g.scalar(loss).as_f64();
            batches += 1;
            let grads = g.backward(loss)?;
            let mut params = model.params_mut();
            for (v, p) in fwd.params.iter().zip(params.iter_mut()) {
                p.zero_grad();
                grads.accumulate_into(*v, p)?;
            }
            sgd_step(&mut params, T::from_f64(lr))?;
        }
        let report = EpochReport {
            epoch: epoch + 1,
            lr,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
        };
        on_epoch(&report, model)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode logits of every sample, `[N, C]` row-major.
pub fn predict_logits<T: Real>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<Vec<T>> {
    check_compat(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * model.class_count());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let fwd = model.forward_frozen(&mut g, xv, Mode::Eval)?;
        out.extend_from_slice(g.value(fwd.logits));
    }
    Ok(out)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let logits = predict_logits(model, data, 128)?;
    let correct = logits
        .chunks(model.class_count())
        .zip(data.labels())
        .filter(|(row, &l)| argmax(row) == l as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn dataset_validates_labels_and_length() {
        assert!(Dataset::<f32>::new([1, 1, 1], 2, vec![0.0; 3], vec![0, 1, 1]).is_ok());
        assert!(Dataset::<f32>::new([1, 1, 1], 2, vec![0.0; 3], vec![0, 2, 1]).is_err());
        assert!(Dataset::<f32>::new([1, 1, 2], 2, vec![0.0; 3], vec![0, 1, 1]).is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let p = TrainConfig::reference_scale();
        assert_eq!((p.epochs, p.batch_size, p.lr), (200, 128, 0.1));
    }
}
