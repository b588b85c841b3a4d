//! Finite-difference gradient checks driven through the autodiff graph.
//!
//! Each check builds `loss = sum(op(inputs) * r)` for a fixed random `r`,
//! takes the analytic gradient from one backward pass, and compares it with
//! [`central_gradient`](crate::central_gradient) of the same forward pass.

use bninvert_core::graph::{Graph, Var};
use bninvert_core::nn::{record_bn_stats, BatchNorm, LayerSpec, Mode, Model};
use bninvert_core::rng::CounterRng;
use bninvert_core::synthesis::{matching_loss, LossOptions};
use bninvert_core::{Result, Tensor};

use crate::{central_gradient, relative_error};

pub const STEP: f64 = 1e-5;

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
type Build = fn(&mut Graph<f64>, &[Var], &mut CounterRng) -> Result<Var>;

pub struct Primitive {
    pub name: &'static str,
    gen: fn(&mut CounterRng) -> Inputs,
    build: Build,
}

fn dim(rng: &mut CounterRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn normal(rng: &mut CounterRng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

/// Values bounded away from zero, for kinks and singularities.
fn away_from_zero(rng: &mut CounterRng, shape: &[usize], positive: bool) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = 0.2 + 1.5 * rng.uniform();
            if positive || rng.uniform() < 0.5 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    (shape.to_vec(), data)
}

fn nchw(rng: &mut CounterRng) -> Vec<usize> {
    vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)]
}

fn matrix(rng: &mut CounterRng) -> Vec<usize> {
    vec![dim(rng, 1, 4), dim(rng, 1, 5)]
}

fn same_pair(rng: &mut CounterRng) -> Inputs {
    let s = matrix(rng);
    vec![normal(rng, &s), normal(rng, &s)]
}

fn one_matrix(rng: &mut CounterRng) -> Inputs {
    let s = matrix(rng);
    vec![normal(rng, &s)]
}

fn moment_input(rng: &mut CounterRng) -> Inputs {
    let mut s = nchw(rng);
    s[0] = dim(rng, 2, 3);
    vec![normal(rng, &s)]
}

fn channel_pair(rng: &mut CounterRng) -> Inputs {
    let s = if rng.uniform() < 0.5 { nchw(rng) } else { matrix(rng) };
    let c = s[1];
    vec![normal(rng, &s), normal(rng, &[c])]
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive { name: "add", gen: same_pair, build: |g, v, _| g.add(v[0], v[1]) },
        Primitive { name: "sub", gen: same_pair, build: |g, v, _| g.sub(v[0], v[1]) },
        Primitive { name: "mul", gen: same_pair, build: |g, v, _| g.mul(v[0], v[1]) },
        Primitive { name: "add_scalar", gen: one_matrix, build: |g, v, _| Ok(g.add_scalar(v[0], 0.7)) },
        Primitive { name: "scale", gen: one_matrix, build: |g, v, _| Ok(g.scale(v[0], -1.3)) },
        Primitive {
            name: "recip",
            gen: |r| {
                let s = matrix(r);
                vec![away_from_zero(r, &s, false)]
            },
            build: |g, v, _| Ok(g.recip(v[0])),
        },
        Primitive {
            name: "sqrt",
            gen: |r| {
                let s = matrix(r);
                vec![away_from_zero(r, &s, true)]
            },
            build: |g, v, _| Ok(g.sqrt(v[0])),
        },
        Primitive { name: "square", gen: one_matrix, build: |g, v, _| Ok(g.square(v[0])) },
        Primitive {
            name: "relu",
            gen: |r| {
                let s = nchw(r);
                vec![away_from_zero(r, &s, false)]
            },
            build: |g, v, _| Ok(g.relu(v[0])),
        },
        Primitive {
            name: "reshape",
            gen: one_matrix,
            build: |g, v, _| {
                let n = g.value(v[0]).len();
                g.reshape(v[0], &[n])
            },
        },
        Primitive { name: "sum", gen: one_matrix, build: |g, v, _| Ok(g.sum(v[0])) },
        Primitive { name: "mean", gen: one_matrix, build: |g, v, _| g.mean(v[0]) },
        Primitive {
            name: "matmul",
            gen: |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                vec![normal(r, &[m, k]), normal(r, &[k, n])]
            },
            build: |g, v, _| g.matmul(v[0], v[1]),
        },
        Primitive { name: "transpose", gen: one_matrix, build: |g, v, _| g.transpose(v[0]) },
        Primitive {
            name: "log_softmax",
            gen: |r| {
                let s = vec![dim(r, 1, 4), dim(r, 2, 5)];
                vec![normal(r, &s)]
            },
            build: |g, v, _| g.log_softmax(v[0]),
        },
        Primitive {
            name: "gather",
            gen: one_matrix,
            build: |g, v, rng| {
                let s = g.shape(v[0]).to_vec();
                let idx: Vec<usize> = (0..s[0]).map(|_| rng.below(s[1])).collect();
                g.gather(v[0], &idx)
            },
        },
        Primitive {
            name: "max_pool2d",
            gen: |r| {
                let s = vec![dim(r, 1, 2), dim(r, 1, 3), 2 * dim(r, 1, 3), 2 * dim(r, 1, 3)];
                let n: usize = s.iter().product();
                // distinct values so the arg-max is stable under perturbation
                let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
                r.shuffle(&mut vals);
                vec![(s, vals)]
            },
            build: |g, v, _| g.max_pool2d(v[0], 2),
        },
        Primitive {
            name: "global_avg_pool",
            gen: |r| {
                let s = nchw(r);
                vec![normal(r, &s)]
            },
            build: |g, v, _| g.global_avg_pool(v[0]),
        },
        Primitive {
            name: "conv2d",
            gen: |r| {
                let k = dim(r, 1, 3);
                let (n, cin, cout) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
                // pick stride/padding, then a size that tiles exactly
                let stride = dim(r, 1, 2);
                let padding = r.below(k);
                let mut steps = dim(r, 1, 3) as isize;
                let size = |steps: isize| (steps - 1) * stride as isize + k as isize - 2 * padding as isize;
                while size(steps) < 1 {
                    steps += 1;
                }
                let h = size(steps) as usize;
                vec![
                    normal(r, &[n, cin, h, h]),
                    normal(r, &[cout, cin, k, k]),
                    normal(r, &[cout]),
                    (vec![stride, padding], vec![]),
                ]
            },
            build: |_, _, _| unreachable!("conv2d has a dedicated builder"),
        },
        Primitive { name: "channel_mean", gen: moment_input, build: |g, v, _| g.channel_mean(v[0]) },
        Primitive { name: "channel_var", gen: moment_input, build: |g, v, _| g.channel_var(v[0]) },
        Primitive { name: "mul_channel", gen: channel_pair, build: |g, v, _| g.mul_channel(v[0], v[1]) },
        Primitive { name: "add_channel", gen: channel_pair, build: |g, v, _| g.add_channel(v[0], v[1]) },
        Primitive {
            name: "batchnorm_train",
            gen: |r| {
                let mut s = nchw(r);
                s[0] = dim(r, 2, 3);
                let c = s[1];
                vec![normal(r, &s), away_from_zero(r, &[c], false), normal(r, &[c])]
            },
            build: |_, _, _| unreachable!("batchnorm has a dedicated builder"),
        },
    ]
}

/// Forward value of `loss = sum(out * weights)`; also returns the vars of
/// the inputs so the caller can read their gradients.
fn forward(
    p: &Primitive,
    g: &mut Graph<f64>,
    inputs: &Inputs,
    build_seed: u64,
    weight_seed: u64,
) -> Result<(Var, Vec<Var>)> {
    let mut rng = CounterRng::new(build_seed);
    let (out, vars) = match p.name {
        "conv2d" => {
            let vars: Vec<Var> = inputs[..3]
                .iter()
                .map(|(s, d)| g.leaf(&Tensor::from_vec(s, d.clone()).unwrap().with_grad(true)))
                .collect();
            let (stride, padding) = (inputs[3].0[0], inputs[3].0[1]);
            (g.conv2d(vars[0], vars[1], Some(vars[2]), stride, padding)?, vars)
        }
        "batchnorm_train" => {
            let x = g.leaf(&Tensor::from_vec(&inputs[0].0, inputs[0].1.clone()).unwrap().with_grad(true));
            let mut bn = BatchNorm::<f64>::new(inputs[1].1.len());
            bn.gamma = Tensor::from_vec(&inputs[1].0, inputs[1].1.clone())?.with_grad(true);
            bn.beta = Tensor::from_vec(&inputs[2].0, inputs[2].1.clone())?.with_grad(true);
            let out = bn.forward(g, x, Mode::Train, true)?;
            let (gamma, beta) = out.params.expect("tracked");
            (out.output, vec![x, gamma, beta])
        }
        _ => {
            let vars: Vec<Var> = inputs
                .iter()
                .map(|(s, d)| g.leaf(&Tensor::from_vec(s, d.clone()).unwrap().with_grad(true)))
                .collect();
            ((p.build)(g, &vars, &mut rng)?, vars)
        }
    };
    let n = g.value(out).len();
    let mut wr = CounterRng::new(weight_seed);
    let w: Vec<f64> = (0..n).map(|_| wr.normal()).collect();
    let shape = g.shape(out).to_vec();
    let wv = g.constant(&shape, w)?;
    let prod = g.mul(out, wv)?;
    Ok((g.sum(prod), vars))
}

/// Worst relative error over `cases` random instances of one primitive.
pub fn check_primitive(p: &Primitive, cases: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut rng = CounterRng::new(seed);
    for case in 0..cases {
        let inputs = (p.gen)(&mut rng);
        let (bs, ws) = (seed ^ (case as u64) << 20, seed.wrapping_add(case as u64 * 7919));
        let mut g = Graph::new();
        let (loss, vars) = forward(p, &mut g, &inputs, bs, ws)?;
        let grads = g.backward(loss)?;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
            let numeric = central_gradient(
                |probe| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].1 = probe.to_vec();
                    let mut g = Graph::new();
                    let (l, _) = forward(p, &mut g, &perturbed, bs, ws).expect("forward succeeded once");
                    g.scalar(l)
                },
                &inputs[k].1,
                STEP,
            );
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    Ok(worst)
}

/// Two-BN toy network used for the full-loss gradient check.
pub fn toy_net(seed: u64) -> Model<f64> {
    let specs = [
        LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::BatchNorm,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear { out_features: 3 },
    ];
    let mut m = Model::<f64>::from_specs([2, 4, 4], &specs, seed).unwrap();
    // non-trivial recorded statistics
    let mut r = CounterRng::new(seed ^ 0xbeef);
    for layer in m.layers_mut() {
        if let bninvert_core::nn::Layer::BatchNorm(bn) = layer {
            bn.running_mean.data_mut().iter_mut().for_each(|v| *v = 0.5 * r.normal());
            bn.running_var.data_mut().iter_mut().for_each(|v| *v = 0.5 + r.uniform());
            bn.gamma.data_mut().iter_mut().for_each(|v| *v = 0.5 + r.uniform());
            bn.beta.data_mut().iter_mut().for_each(|v| *v = 0.3 * r.normal());
        }
    }
    m
}

pub fn matching_value_at(model: &Model<f64>, x: &[f64], labels: &[usize], opts: &LossOptions) -> Result<f64> {
    let snap = record_bn_stats(model)?;
    let [c, h, w] = model.input_shape();
    let t = Tensor::from_vec(&[labels.len(), c, h, w], x.to_vec())?;
    let mut g = Graph::new();
    let xv = g.leaf(&t);
    let f = model.forward_frozen(&mut g, xv, Mode::SynthEval)?;
    let (loss, _) = matching_loss(&mut g, &f.bn_stats, &snap, f.logits, labels, opts)?;
    Ok(g.scalar(loss))
}

/// Worst relative error of the full statistics-matching loss gradient with
/// respect to the input pixels, over `cases` random toy networks and batches.
pub fn check_matching_loss(cases: usize, seed: u64, h: f64, opts: &LossOptions) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let model = toy_net(seed.wrapping_add(case as u64));
        let n = 3;
        let labels: Vec<usize> = (0..n).map(|i| (i + case) % 3).collect();
        let x = Tensor::<f64>::randn(&[n, 2, 4, 4], 0.0, 1.0, seed ^ (case as u64 + 1) << 8)?.with_grad(true);
        let snap = record_bn_stats(&model)?;
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let f = model.forward_frozen(&mut g, xv, Mode::SynthEval)?;
        let (loss, _) = matching_loss(&mut g, &f.bn_stats, &snap, f.logits, &labels, opts)?;
        let grads = g.backward(loss)?;
        let analytic = grads.get(xv).expect("input tracks gradients").to_vec();
        let numeric = central_gradient(|p| matching_value_at(&model, p, &labels, opts).unwrap(), x.data(), h);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
