//! Update rules: Adam for synthetic inputs, plain SGD with a cosine-annealed
//! learning rate for model training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::arg(format!(
                "Adam needs lr >= 0 and betas in [0, 1), got lr={lr} betas=({beta1}, {beta2})"
            )));
        }
        Ok(Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            eps: T::from_f64(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)` for every tensor, reading
    /// `p.grad`. The parameter list must keep the same shapes across steps.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if !p.requires_grad() {
                return Err(Error::InvalidState(format!("parameter {i} has no gradient buffer")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::InvalidState("parameter list changed between Adam steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.data_and_grad_mut();
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] = data[k] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `p <- p - lr * grad`.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad() {
            return Err(Error::InvalidState(format!("parameter {i} has no gradient buffer")));
        }
        let (data, grad) = p.data_and_grad_mut();
        data.iter_mut().zip(grad).for_each(|(d, &g)| *d = *d - lr * g);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_steps: usize) -> Self {
        CosineSchedule {
            eta_max,
            eta_min,
            total_steps,
        }
    }

    /// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t / T)) / 2`, clamped at `t >= T`.
    pub fn lr(&self, t: usize) -> f64 {
        if self.total_steps == 0 || t == 0 {
            return self.eta_max;
        }
        if t >= self.total_steps {
            return self.eta_min;
        }
        let frac = t as f64 / self.total_steps as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, t: usize) -> f64 {
    schedule.lr(t)
}
