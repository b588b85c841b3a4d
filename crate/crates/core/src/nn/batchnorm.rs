use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How a forward pass treats BatchNorm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch moments and update the running statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
    /// Normalize with the running statistics and report each layer's batch
    /// moments so they can enter a loss. Never mutates the layer.
    SynthEval,
}

/// BatchNorm parameters and running statistics (`running_var` holds a variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// Output of [`BatchNorm::forward`]: the normalized tensor and, outside
/// `Eval`, the batch `(mean, var)` of the input.
#[derive(Debug, Clone, Copy)]
pub struct BnOutput {
    pub output: Var,
    pub batch_stats: Option<(Var, Var)>,
    /// `(gamma, beta)` leaves when parameters are tracked.
    pub params: Option<(Var, Var)>,
}

impl<T: Real> BatchNorm<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()).with_grad(true),
            beta: Tensor::zeros(&[channels]).with_grad(true),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::from_f64(DEFAULT_MOMENTUM),
            eps: T::from_f64(DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Builds the normalization into `g`. `gamma`/`beta` are registered as
    /// gradient-tracking leaves only when `track_params` is set.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, track_params: bool) -> Result<BnOutput> {
        let shape = g.shape(x);
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape(format!(
                "BatchNorm over {} channels got input {shape:?}",
                self.channels()
            )));
        }
        let c = self.channels();
        let mut params = None;
        let (gamma, beta) = if track_params {
            let (gv, bv) = (g.leaf(&self.gamma), g.leaf(&self.beta));
            params = Some((gv, bv));
            (gv, bv)
        } else {
            (
                g.constant(&[c], self.gamma.data().to_vec())?,
                g.constant(&[c], self.beta.data().to_vec())?,
            )
        };
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Train => {
                let (m, v) = g.batch_moments(x)?;
                let shifted = g.add_scalar(v, self.eps);
                let sd = g.sqrt(shifted);
                (m, g.recip(sd), Some((m, v)))
            }
            Mode::Eval | Mode::SynthEval => {
                let m = g.constant(&[c], self.running_mean.data().to_vec())?;
                let inv = self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| (v + self.eps).sqrt().recip())
                    .collect();
                let inv = g.constant(&[c], inv)?;
                let stats = if mode == Mode::SynthEval {
                    Some(g.batch_moments(x)?)
                } else {
                    None
                };
                (m, inv, stats)
            }
        };
        let scale = g.mul(gamma, inv_std)?;
        let mean_scaled = g.mul(mean, scale)?;
        let shift = g.sub(beta, mean_scaled)?;
        let scaled = g.mul_channel(x, scale)?;
        let output = g.add_channel(scaled, shift)?;
        Ok(BnOutput {
            output,
            batch_stats,
            params,
        })
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) -> Result<()> {
        if batch_mean.len() != self.channels() || batch_var.len() != self.channels() {
            return Err(Error::shape("batch statistics do not match BatchNorm channels"));
        }
        let keep = T::one() - self.momentum;
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: U::from_f64(self.momentum.as_f64()),
            eps: U::from_f64(self.eps.as_f64()),
        }
    }
}

/// Normalizes `x` and, in `Train` mode, folds the batch moments into the
/// running statistics.
pub fn bn_forward<T: Real>(g: &mut Graph<T>, x: Var, state: &mut BatchNorm<T>, mode: Mode) -> Result<BnOutput> {
    let out = state.forward(g, x, mode, mode == Mode::Train)?;
    if mode == Mode::Train {
        let (m, v) = out.batch_stats.expect("train mode reports batch moments");
        let (m, v) = (g.value(m).to_vec(), g.value(v).to_vec());
        state.update_running(&m, &v)?;
    }
    Ok(out)
}

/// Per-channel statistics of one BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running statistics of every BatchNorm layer, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStatsSnapshot<T> {
    layers: Vec<BnStats<T>>,
}

impl<T: Real> BnStatsSnapshot<T> {
    pub fn new(layers: Vec<BnStats<T>>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.mean.len() != l.var.len() {
                return Err(Error::shape(format!("BN layer {i}: mean and var lengths differ")));
            }
            if l.var.iter().any(|&v| v < T::zero()) {
                return Err(Error::arg(format!("BN layer {i}: negative variance")));
            }
        }
        Ok(BnStatsSnapshot { layers })
    }

    pub fn layers(&self) -> &[BnStats<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        // two samples per channel at -1/+1 plus spatial copies: mean 0, var 1
        let x = Tensor::<f64>::from_vec(&[2, 2, 1, 2], alloc::vec![-1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0])
            .unwrap();
        let mut bn = BatchNorm::<f64>::new(2);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let out = bn_forward(&mut g, xv, &mut bn, Mode::Eval).unwrap();
        for (a, b) in g.value(out.output).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(out.batch_stats.is_none());
    }

    #[test]
    fn train_updates_running_mean() {
        let x = Tensor::<f64>::full(&[4, 1], 10.0);
        let mut bn = BatchNorm::<f64>::new(1);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        bn_forward(&mut g, xv, &mut bn, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 1.0).abs() < 1e-12);
        // batch variance is 0, so running var decays from 1 to 0.9
        assert!((bn.running_var.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn synth_eval_leaves_state_untouched() {
        let x = Tensor::<f32>::randn(&[3, 2, 2, 2], 0.5, 2.0, 1).unwrap();
        let mut bn = BatchNorm::<f32>::new(2);
        bn.running_mean.data_mut()[0] = 0.25;
        let before = bn.clone();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let out = bn_forward(&mut g, xv, &mut bn, Mode::SynthEval).unwrap();
        assert!(out.batch_stats.is_some());
        assert_eq!(bn, before);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::<f32>::zeros(&[2, 3, 2, 2]);
        let mut bn = BatchNorm::<f32>::new(2);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        assert!(matches!(
            bn_forward(&mut g, xv, &mut bn, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }
}
