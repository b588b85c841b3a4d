//! Core numerics for synthesizing replacement datasets from the BatchNorm
//! statistics of a pre-trained classifier.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that does
//! not touch the filesystem:
//!
//! - [`graph`]: a small reverse-mode autodiff engine over [`Tensor`]s,
//! - [`nn`]: layers, BatchNorm with running statistics, models and the
//!   binary checkpoint codec,
//! - [`optim`]: Adam, plain SGD and cosine annealing,
//! - [`synthesis`]: noise initialization, label assignment, the
//!   statistics-matching loss and the per-batch optimization loop,
//! - [`train`]: in-memory datasets, training and top-1 evaluation.
//!
//! Every computation is generic over [`Real`] so the same code path runs in
//! `f32` for training and in `f64` for finite-difference checks.
#![no_std]

extern crate alloc;

pub mod error;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
