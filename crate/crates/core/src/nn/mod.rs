//! Layers, models and BatchNorm statistics.

mod batchnorm;
pub mod checkpoint;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;

pub use batchnorm::{bn_forward, BatchNorm, BnOutput, BnStats, BnStatsSnapshot, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};

/// Architecture description without parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
    BatchNorm,
    Relu,
    MaxPool(usize),
    GlobalAvgPool,
    /// `x + body(x)`; the body must preserve the shape.
    Residual(Vec<LayerSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Fully connected layer with a `[out, in]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool(usize),
    GlobalAvgPool,
    Residual(Vec<Layer<T>>),
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Batch `(mean, var)` per BatchNorm layer; filled in `SynthEval` only.
    pub bn_stats: Vec<(Var, Var)>,
    /// Parameter leaves in [`Model::params_mut`] order; filled in `Train` only.
    pub params: Vec<Var>,
}

struct Trace<T> {
    bn_stats: Vec<(Var, Var)>,
    params: Vec<Var>,
    running_updates: Vec<(Vec<T>, Vec<T>)>,
}

impl<T> Default for Trace<T> {
    fn default() -> Self {
        Trace {
            bn_stats: Vec::new(),
            params: Vec::new(),
            running_updates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
    class_count: usize,
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let mut rng = CounterRng::new(seed);
    let n = shape.iter().product();
    let data = rng.normals(n, 0.0, std).into_iter().map(T::from_f64).collect();
    Tensor::from_vec(shape, data).expect("length matches shape").with_grad(true)
}

/// Shape of one sample flowing through the network: `[C, H, W]` or `[F]`.
fn instantiate<T: Real>(
    specs: &[LayerSpec],
    shape: &mut Vec<usize>,
    rng: &mut CounterRng,
) -> Result<Vec<Layer<T>>> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let layer = match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = spatial(shape, "Conv")?;
                let padded = |d: usize| d + 2 * padding;
                if *stride == 0
                    || *kernel == 0
                    || padded(h) < *kernel
                    || padded(w) < *kernel
                    || (padded(h) - kernel) % stride != 0
                    || (padded(w) - kernel) % stride != 0
                {
                    return Err(Error::InvalidModel(format!(
                        "Conv k={kernel} s={stride} p={padding} does not tile a {h}x{w} input"
                    )));
                }
                let fan_in = c * kernel * kernel;
                let weight = he_normal(&[*out_channels, c, *kernel, *kernel], fan_in, rng.next_u64());
                *shape = vec![
                    *out_channels,
                    (padded(h) - kernel) / stride + 1,
                    (padded(w) - kernel) / stride + 1,
                ];
                Layer::Conv(Conv {
                    weight,
                    bias: Tensor::zeros(&[*out_channels]).with_grad(true),
                    stride: *stride,
                    padding: *padding,
                })
            }
            LayerSpec::Linear { out_features } => {
                let fan_in: usize = shape.iter().product();
                let weight = he_normal(&[*out_features, fan_in], fan_in, rng.next_u64());
                *shape = vec![*out_features];
                Layer::Linear(Linear {
                    weight,
                    bias: Tensor::zeros(&[*out_features]).with_grad(true),
                })
            }
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape[0])),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool(size) => {
                let [c, h, w] = spatial(shape, "MaxPool")?;
                if *size == 0 || h < *size || w < *size {
                    return Err(Error::InvalidModel(format!("MaxPool({size}) on {h}x{w}")));
                }
                *shape = vec![c, h / size, w / size];
                Layer::MaxPool(*size)
            }
            LayerSpec::GlobalAvgPool => {
                let [c, _, _] = spatial(shape, "GlobalAvgPool")?;
                *shape = vec![c];
                Layer::GlobalAvgPool
            }
            LayerSpec::Residual(body) => {
                let before = shape.clone();
                let inner = instantiate(body, shape, rng)?;
                if *shape != before {
                    return Err(Error::InvalidModel(format!(
                        "residual body maps {before:?} to {shape:?}"
                    )));
                }
                Layer::Residual(inner)
            }
        };
        layers.push(layer);
    }
    Ok(layers)
}

fn spatial(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::InvalidModel(format!("{what} needs a [C, H, W] input, got {shape:?}"))),
    }
}

/// Infers the per-sample output shape of instantiated layers.
fn infer_shape<T: Real>(layers: &[Layer<T>], shape: &mut Vec<usize>) -> Result<()> {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                let [ci, h, w] = spatial(shape, "Conv")?;
                let ws = c.weight.shape();
                if ws.len() != 4 || ws[1] != ci || c.bias.shape() != [ws[0]] || c.stride == 0 {
                    return Err(Error::InvalidModel(format!("Conv weight {ws:?} on {ci} channels")));
                }
                let out = |d: usize, k: usize| -> Result<usize> {
                    let p = d + 2 * c.padding;
                    if p < k || (p - k) % c.stride != 0 {
                        return Err(Error::InvalidModel("Conv does not tile its input".into()));
                    }
                    Ok((p - k) / c.stride + 1)
                };
                *shape = vec![ws[0], out(h, ws[2])?, out(w, ws[3])?];
            }
            Layer::Linear(l) => {
                let ws = l.weight.shape();
                let fan_in: usize = shape.iter().product();
                if ws.len() != 2 || ws[1] != fan_in || l.bias.shape() != [ws[0]] {
                    return Err(Error::InvalidModel(format!("Linear weight {ws:?} on {fan_in} inputs")));
                }
                *shape = vec![ws[0]];
            }
            Layer::BatchNorm(bn) => {
                let ok = bn.gamma.len() == shape[0]
                    && bn.beta.len() == shape[0]
                    && bn.running_mean.len() == shape[0]
                    && bn.running_var.len() == shape[0];
                if !ok {
                    return Err(Error::InvalidModel(format!(
                        "BatchNorm of {} channels on {shape:?}",
                        bn.gamma.len()
                    )));
                }
            }
            Layer::Relu => {}
            Layer::MaxPool(size) => {
                let [c, h, w] = spatial(shape, "MaxPool")?;
                if *size == 0 || h < *size || w < *size {
                    return Err(Error::InvalidModel(format!("MaxPool({size}) on {h}x{w}")));
                }
                *shape = vec![c, h / size, w / size];
            }
            Layer::GlobalAvgPool => {
                let [c, _, _] = spatial(shape, "GlobalAvgPool")?;
                *shape = vec![c];
            }
            Layer::Residual(body) => {
                let before = shape.clone();
                infer_shape(body, shape)?;
                if *shape != before {
                    return Err(Error::InvalidModel("residual body changes the shape".into()));
                }
            }
        }
    }
    Ok(())
}

impl<T: Real> Model<T> {
    /// Instantiates `specs` with He-normal weights, zero biases and fresh
    /// BatchNorm state. The network must end in `[class_count]` features.
    pub fn from_specs(input_shape: [usize; 3], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut rng = CounterRng::new(derive_seed(seed, 0x1417));
        let layers = instantiate(specs, &mut shape, &mut rng)?;
        Self::from_layers(input_shape, layers)
    }

    /// Wraps already instantiated layers after checking they chain to a vector output.
    pub fn from_layers(input_shape: [usize; 3], layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        infer_shape(&layers, &mut shape)?;
        if shape.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "network must end in a feature vector, ends in {shape:?}"
            )));
        }
        Ok(Model {
            input_shape,
            layers,
            class_count: shape[0],
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Number of BatchNorm layers, the `L` of the statistics loss.
    pub fn num_bn_layers(&self) -> usize {
        fn count<T>(layers: &[Layer<T>]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    Layer::BatchNorm(_) => 1,
                    Layer::Residual(b) => count(b),
                    _ => 0,
                })
                .sum()
        }
        count(&self.layers)
    }

    /// BatchNorm layers in forward order.
    pub fn bn_layers(&self) -> Vec<&BatchNorm<T>> {
        fn walk<'a, T>(layers: &'a [Layer<T>], out: &mut Vec<&'a BatchNorm<T>>) {
            for l in layers {
                match l {
                    Layer::BatchNorm(bn) => out.push(bn),
                    Layer::Residual(b) => walk(b, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        fn walk<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BatchNorm<T>>) {
            for l in layers {
                match l {
                    Layer::BatchNorm(bn) => out.push(bn),
                    Layer::Residual(b) => walk(b, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&mut self.layers, &mut out);
        out
    }

    /// Trainable tensors in forward order: conv/linear weight then bias,
    /// BatchNorm gamma then beta.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn walk<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut Tensor<T>>) {
            for l in layers {
                match l {
                    Layer::Conv(c) => {
                        out.push(&mut c.weight);
                        out.push(&mut c.bias);
                    }
                    Layer::Linear(c) => {
                        out.push(&mut c.weight);
                        out.push(&mut c.bias);
                    }
                    Layer::BatchNorm(bn) => {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                    Layer::Residual(b) => walk(b, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&mut self.layers, &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Runs the network on `x` (`[N, C, H, W]`). In `Train` mode parameters
    /// are gradient-tracking leaves and BatchNorm running statistics are
    /// updated; the other modes leave the model untouched.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward> {
        let mut trace = Trace::default();
        let logits = self.trace(g, x, mode, &mut trace)?;
        if mode == Mode::Train {
            for (bn, (m, v)) in self.bn_layers_mut().into_iter().zip(&trace.running_updates) {
                bn.update_running(m, v)?;
            }
        }
        Ok(Forward {
            logits,
            bn_stats: trace.bn_stats,
            params: trace.params,
        })
    }

    /// Forward pass through a shared model; `Train` mode is rejected.
    pub fn forward_frozen(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward> {
        if mode == Mode::Train {
            return Err(Error::InvalidState("Train mode needs exclusive access to the model".into()));
        }
        let mut trace = Trace::default();
        let logits = self.trace(g, x, mode, &mut trace)?;
        Ok(Forward {
            logits,
            bn_stats: trace.bn_stats,
            params: trace.params,
        })
    }

    fn trace(&self, g: &mut Graph<T>, x: Var, mode: Mode, trace: &mut Trace<T>) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "model expects [N, {}, {}, {}] input, got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        run_layers(&self.layers, g, x, mode, trace)
    }

    /// Converts every parameter and statistic to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        fn conv<T: Real, U: Real>(layers: &[Layer<T>]) -> Vec<Layer<U>> {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(Conv {
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                        stride: c.stride,
                        padding: c.padding,
                    }),
                    Layer::Linear(c) => Layer::Linear(Linear {
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                    }),
                    Layer::BatchNorm(bn) => Layer::BatchNorm(bn.cast()),
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool(s) => Layer::MaxPool(*s),
                    Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                    Layer::Residual(b) => Layer::Residual(conv(b)),
                })
                .collect()
        }
        Model {
            input_shape: self.input_shape,
            layers: conv(&self.layers),
            class_count: self.class_count,
        }
    }
}

fn param_leaf<T: Real>(g: &mut Graph<T>, t: &Tensor<T>, track: bool, trace: &mut Trace<T>) -> Result<Var> {
    if track {
        let v = g.leaf(t);
        trace.params.push(v);
        Ok(v)
    } else {
        g.constant(t.shape(), t.data().to_vec())
    }
}

fn run_layers<T: Real>(layers: &[Layer<T>], g: &mut Graph<T>, mut x: Var, mode: Mode, trace: &mut Trace<T>) -> Result<Var> {
    let track = mode == Mode::Train;
    for layer in layers {
        x = match layer {
            Layer::Conv(c) => {
                let w = param_leaf(g, &c.weight, track, trace)?;
                let b = param_leaf(g, &c.bias, track, trace)?;
                g.conv2d(x, w, Some(b), c.stride, c.padding)?
            }
            Layer::Linear(l) => {
                let w = param_leaf(g, &l.weight, track, trace)?;
                let b = param_leaf(g, &l.bias, track, trace)?;
                let n = g.shape(x)[0];
                let features = g.value(x).len() / n.max(1);
                let flat = if g.shape(x).len() == 2 { x } else { g.reshape(x, &[n, features])? };
                let wt = g.transpose(w)?;
                let y = g.matmul(flat, wt)?;
                g.add_channel(y, b)?
            }
            Layer::BatchNorm(bn) => {
                let out = bn.forward(g, x, mode, track)?;
                if let Some((gamma, beta)) = out.params {
                    trace.params.push(gamma);
                    trace.params.push(beta);
                }
                match (mode, out.batch_stats) {
                    (Mode::SynthEval, Some(st)) => trace.bn_stats.push(st),
                    (Mode::Train, Some((m, v))) => {
                        trace.running_updates.push((g.value(m).to_vec(), g.value(v).to_vec()));
                    }
                    _ => {}
                }
                out.output
            }
            Layer::Relu => g.relu(x),
            Layer::MaxPool(s) => g.max_pool2d(x, *s)?,
            Layer::GlobalAvgPool => g.global_avg_pool(x)?,
            Layer::Residual(body) => {
                let y = run_layers(body, g, x, mode, trace)?;
                g.add(x, y)?
            }
        };
    }
    Ok(x)
}

/// Deep copy of every BatchNorm running mean and variance, in forward order.
pub fn record_bn_stats<T: Real>(model: &Model<T>) -> Result<BnStatsSnapshot<T>> {
    let layers: Vec<BnStats<T>> = model
        .bn_layers()
        .into_iter()
        .map(|bn| BnStats {
            mean: bn.running_mean.data().to_vec(),
            var: bn.running_var.data().to_vec(),
        })
        .collect();
    if layers.is_empty() {
        return Err(Error::InvalidModel("model has no BatchNorm layers".into()));
    }
    BnStatsSnapshot::new(layers)
}

fn conv3x3(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

/// Small residual CNN with six BatchNorm layers: a conv-BN-ReLU stem with
/// 2x2 max pooling, two residual blocks (conv-BN-ReLU-conv-BN plus identity)
/// each followed by ReLU, a BatchNorm ahead of the head, global average
/// pooling and a linear classifier.
pub fn tiny_resnet_specs(width: usize, class_count: usize) -> Vec<LayerSpec> {
    let block = || {
        LayerSpec::Residual(vec![
            conv3x3(width),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            conv3x3(width),
            LayerSpec::BatchNorm,
        ])
    };
    vec![
        conv3x3(width),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool(2),
        block(),
        LayerSpec::Relu,
        block(),
        LayerSpec::Relu,
        LayerSpec::BatchNorm,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            out_features: class_count,
        },
    ]
}

pub fn tiny_resnet<T: Real>(input_shape: [usize; 3], width: usize, class_count: usize, seed: u64) -> Result<Model<T>> {
    Model::from_specs(input_shape, &tiny_resnet_specs(width, class_count), seed)
}
