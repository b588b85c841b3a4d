//! Independent reference computations for tests.
//!
//! The reference computations in this file are plain nested loops over
//! `f64` slices that never touch the autodiff graph, so they can check the
//! optimized paths of `bninvert-core`; only model parameters are read from
//! the core types. [`gradcheck`] pairs the graph with finite differences.

pub mod gradcheck;

use bninvert_core::nn::{Layer, Model};

/// Central finite-difference gradient of `f` at `x`.
pub fn central_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct seven-loop cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    weight: &[f64],
    [cout, wcin, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(cin, wcin);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo])
}

/// Two-pass per-channel mean and biased variance of an `[N, C, inner]` layout.
pub fn moments(x: &[f64], n: usize, c: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            for k in 0..inner {
                s += x[(b * c + ch) * inner + k];
            }
        }
        mean[ch] = s / count;
        let mut q = 0.0;
        for b in 0..n {
            for k in 0..inner {
                let d = x[(b * c + ch) * inner + k] - mean[ch];
                q += d * d;
            }
        }
        var[ch] = q / count;
    }
    (mean, var)
}

/// Closed-form EMA after feeding `batches` one at a time.
pub fn ema(initial: f64, batches: &[f64], momentum: f64) -> f64 {
    let n = batches.len();
    let mut acc = (1.0 - momentum).powi(n as i32) * initial;
    for (j, b) in batches.iter().enumerate() {
        acc += momentum * (1.0 - momentum).powi((n - 1 - j) as i32) * b;
    }
    acc
}

/// Activations of a reference forward pass.
pub struct ReferenceForward {
    /// `[N, classes]` logits.
    pub logits: Vec<f64>,
    /// Batch `(mean, var)` at the input of every BatchNorm layer.
    pub bn_inputs: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Act {
    data: Vec<f64>,
    /// per-sample shape
    shape: Vec<usize>,
}

/// Evaluation-mode forward of `model` on `n` samples, one loop nest per layer.
pub fn reference_forward(model: &Model<f64>, x: &[f64], n: usize) -> ReferenceForward {
    let mut bn_inputs = Vec::new();
    let act = Act {
        data: x.to_vec(),
        shape: model.input_shape().to_vec(),
    };
    let out = run(model.layers(), act, n, &mut bn_inputs);
    ReferenceForward {
        logits: out.data,
        bn_inputs,
    }
}

fn run(layers: &[Layer<f64>], mut a: Act, n: usize, bn_inputs: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Act {
    for layer in layers {
        a = match layer {
            Layer::Conv(c) => {
                let ws = c.weight.shape();
                let (out, s) = conv2d(
                    &a.data,
                    [n, a.shape[0], a.shape[1], a.shape[2]],
                    c.weight.data(),
                    [ws[0], ws[1], ws[2], ws[3]],
                    Some(c.bias.data()),
                    c.stride,
                    c.padding,
                );
                Act {
                    data: out,
                    shape: s[1..].to_vec(),
                }
            }
            Layer::Linear(l) => {
                let ws = l.weight.shape();
                let (fo, fi) = (ws[0], ws[1]);
                let mut out = vec![0.0; n * fo];
                for s in 0..n {
                    for o in 0..fo {
                        let mut acc = l.bias.data()[o];
                        for i in 0..fi {
                            acc += l.weight.data()[o * fi + i] * a.data[s * fi + i];
                        }
                        out[s * fo + o] = acc;
                    }
                }
                Act {
                    data: out,
                    shape: vec![fo],
                }
            }
            Layer::BatchNorm(bn) => {
                let c = a.shape[0];
                let inner: usize = a.shape[1..].iter().product();
                bn_inputs.push(moments(&a.data, n, c, inner));
                let mut out = a.data.clone();
                for s in 0..n {
                    for ch in 0..c {
                        let inv = 1.0 / (bn.running_var.data()[ch] + bn.eps).sqrt();
                        for k in 0..inner {
                            let i = (s * c + ch) * inner + k;
                            out[i] = (a.data[i] - bn.running_mean.data()[ch]) * inv * bn.gamma.data()[ch]
                                + bn.beta.data()[ch];
                        }
                    }
                }
                Act { data: out, shape: a.shape }
            }
            Layer::Relu => Act {
                data: a.data.iter().map(|&v| v.max(0.0)).collect(),
                shape: a.shape,
            },
            Layer::MaxPool(size) => {
                let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                let (ho, wo) = (h / size, w / size);
                let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let v = a.data[(p * h + oy * size + dy) * w + ox * size + dx];
                                    let o = &mut out[(p * ho + oy) * wo + ox];
                                    *o = o.max(v);
                                }
                            }
                        }
                    }
                }
                Act {
                    data: out,
                    shape: vec![c, ho, wo],
                }
            }
            Layer::GlobalAvgPool => {
                let c = a.shape[0];
                let inner: usize = a.shape[1..].iter().product();
                let mut out = vec![0.0; n * c];
                for p in 0..n * c {
                    out[p] = a.data[p * inner..(p + 1) * inner].iter().sum::<f64>() / inner as f64;
                }
                Act {
                    data: out,
                    shape: vec![c],
                }
            }
            Layer::Residual(body) => {
                let skip = a.data.clone();
                let shape = a.shape.clone();
                let y = run(body, a, n, bn_inputs);
                Act {
                    data: skip.iter().zip(&y.data).map(|(s, v)| s + v).collect(),
                    shape,
                }
            }
        };
    }
    a
}

/// Statistics-matching loss from plain values: squared mean and variance
/// gaps summed over layers and channels, plus mean cross-entropy.
pub fn matching_value(
    bn_inputs: &[(Vec<f64>, Vec<f64>)],
    recorded: &[(Vec<f64>, Vec<f64>)],
    logits: &[f64],
    classes: usize,
    labels: &[usize],
) -> (f64, f64, f64) {
    let mut mean_term = 0.0;
    let mut var_term = 0.0;
    for ((bm, bv), (rm, rv)) in bn_inputs.iter().zip(recorded) {
        for ch in 0..bm.len() {
            mean_term += (bm[ch] - rm[ch]).powi(2);
            var_term += (bv[ch] - rv[ch]).powi(2);
        }
    }
    let mut ce = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        ce += lse - row[label];
    }
    (mean_term, var_term, ce / labels.len() as f64)
}

/// Top-1 accuracy computed one sample at a time through [`reference_forward`].
pub fn accuracy_loop(model: &Model<f64>, images: &[f64], labels: &[u16]) -> f64 {
    let per: usize = model.input_shape().iter().product();
    let classes = model.class_count();
    let mut correct = 0usize;
    for (s, &label) in labels.iter().enumerate() {
        let out = reference_forward(model, &images[s * per..(s + 1) * per], 1);
        let mut best = 0;
        for k in 1..classes {
            if out.logits[k] > out.logits[best] {
                best = k;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_cubic() {
        let g = central_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn ema_matches_iteration() {
        let b = [10.0, -2.0, 4.5];
        let mut r = 1.0;
        for v in b {
            r = 0.9 * r + 0.1 * v;
        }
        assert!((ema(1.0, &b, 0.1) - r).abs() < 1e-12);
    }
}
