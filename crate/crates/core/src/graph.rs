//! Single-use reverse-mode computation graph.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Values are computed eagerly; [`Graph::backward`] then walks the record in
//! reverse and returns the gradient of a scalar output with respect to every
//! node that depends on a gradient-tracking leaf. A graph can be
//! differentiated once; the next forward pass builds a new graph.
//!
//! Tensors with a channel axis use the `[N, C, ...]` layout throughout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Recip(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ChannelMean(Var),
    ChannelVar { input: Var, mean: Vec<T> },
    MulChannel(Var, Var),
    AddChannel(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it depends on a tracked leaf.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor.grad`. Missing gradients add zero.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None if tensor.requires_grad() => Ok(()),
            None => Err(Error::InvalidState("tensor does not track gradients".into())),
        }
    }
}

/// Splits a `[N, C, ...]` shape into `(N, C, inner)`.
fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "expected a [N, C, ...] tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of `v`; meant for scalar nodes.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copies `v` out of the graph as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Registers a tensor as a leaf. Gradient tracking follows the tensor.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.tracks(a);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.tracks(a);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    /// Sum of all elements, as a scalar of shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.tracks(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::arg("mean of an empty tensor"));
        }
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.tracks(a);
        Ok(self.push(Vec::new(), vec![s / T::from_usize(n)], rg, Op::Mean(a)))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transposed(self.value(a), r, c);
        let rg = self.tracks(a);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(a)))
    }

    /// Row-wise log-softmax of an `[N, C]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape(format!("log_softmax needs [N, C], got {s:?}")));
        }
        let c = s[1];
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let shape = s.to_vec();
        let rg = self.tracks(a);
        Ok(self.push(shape, out, rg, Op::LogSoftmax(a)))
    }

    /// Picks `a[n, index[n]]` from an `[N, C]` matrix.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::shape(format!(
                "gather of {} indices from {s:?}",
                index.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::arg(format!("gather index {bad} out of range 0..{c}")));
        }
        let v = self.value(a);
        let out = index.iter().enumerate().map(|(n, &i)| v[n * c + i]).collect();
        let rg = self.tracks(a);
        Ok(self.push(vec![index.len()], out, rg, Op::Gather(a, index.to_vec())))
    }

    /// Non-overlapping `size x size` max pooling; trailing rows/columns that do
    /// not fill a window are dropped. Ties go to the first element in row-major order.
    pub fn max_pool2d(&mut self, a: Var, size: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape(format!("max_pool2d({size}) of {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let v = self.value(a);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.tracks(a);
        Ok(self.push(vec![n, c, ho, wo], out, rg, Op::MaxPool { input: a, argmax }))
    }

    /// Mean over all axes after the channel axis: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, inner) = channel_dims(self.shape(a))?;
        if inner == 0 {
            return Err(Error::shape("global_avg_pool over an empty spatial extent"));
        }
        let scale = T::from_usize(inner).recip();
        let out = self
            .value(a)
            .chunks(inner)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let rg = self.tracks(a);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool(a)))
    }

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]` plus an
    /// optional `[Cout]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::shape(format!("conv2d of input {si:?} with weight {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        let (n, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let out_dim = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * padding;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::shape(format!(
                    "conv2d: ({len} + 2*{padding} - {k}) is not a non-negative multiple of stride {stride}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let h_out = out_dim(h, kh)?;
        let w_out = out_dim(w, kw)?;
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} does not match {c_out} output channels",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        };
        let out = conv_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let rg = self.tracks(input) || self.tracks(weight) || bias.is_some_and(|b| self.tracks(b));
        Ok(self.push(
            vec![n, c_out, h_out, w_out],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn check_moment_count(&self, a: Var) -> Result<(usize, usize, usize)> {
        let (n, c, inner) = channel_dims(self.shape(a))?;
        if n * inner < 2 {
            return Err(Error::arg(format!(
                "batch moments need at least 2 values per channel, got {}",
                n * inner
            )));
        }
        Ok((n, c, inner))
    }

    /// Per-channel mean over every non-channel axis: `[N, C, ...] -> [C]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (n, c, inner) = self.check_moment_count(a)?;
        let mean = channel_mean_of(self.value(a), n, c, inner);
        let rg = self.tracks(a);
        Ok(self.push(vec![c], mean, rg, Op::ChannelMean(a)))
    }

    /// Per-channel biased variance (divide by count): `[N, C, ...] -> [C]`.
    pub fn channel_var(&mut self, a: Var) -> Result<Var> {
        let (n, c, inner) = self.check_moment_count(a)?;
        let v = self.value(a);
        let mean = channel_mean_of(v, n, c, inner);
        let mut var = vec![T::zero(); c];
        for (i, block) in v.chunks(inner).enumerate() {
            let ch = i % c;
            let m = mean[ch];
            var[ch] = var[ch] + block.iter().map(|&x| (x - m) * (x - m)).sum::<T>();
        }
        let count = T::from_usize(n * inner);
        var.iter_mut().for_each(|x| *x = *x / count);
        let rg = self.tracks(a);
        Ok(self.push(vec![c], var, rg, Op::ChannelVar { input: a, mean }))
    }

    /// `(mean, var)` per channel, the statistics a BatchNorm layer sees.
    pub fn batch_moments(&mut self, a: Var) -> Result<(Var, Var)> {
        Ok((self.channel_mean(a)?, self.channel_var(a)?))
    }

    fn channel_operand(&self, a: Var, per_channel: Var) -> Result<(usize, usize, usize)> {
        let dims = channel_dims(self.shape(a))?;
        if self.shape(per_channel) != [dims.1] {
            return Err(Error::shape(format!(
                "per-channel operand {:?} does not match {} channels",
                self.shape(per_channel),
                dims.1
            )));
        }
        Ok(dims)
    }

    /// `a[n, c, ...] * s[c]`.
    pub fn mul_channel(&mut self, a: Var, s: Var) -> Result<Var> {
        let (_, c, inner) = self.channel_operand(a, s)?;
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        for (i, block) in out.chunks_mut(inner.max(1)).enumerate() {
            let k = sv[i % c];
            block.iter_mut().for_each(|x| *x = *x * k);
        }
        let rg = self.tracks(a) || self.tracks(s);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulChannel(a, s)))
    }

    /// `a[n, c, ...] + b[c]`.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c, inner) = self.channel_operand(a, b)?;
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for (i, block) in out.chunks_mut(inner.max(1)).enumerate() {
            let k = bv[i % c];
            block.iter_mut().for_each(|x| *x = *x + k);
        }
        let rg = self.tracks(a) || self.tracks(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddChannel(a, b)))
    }

    /// Differentiates the scalar `loss`. A graph accepts exactly one call.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::InvalidState(
                "backward already ran on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.tracks(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let mut send = |v: Var, f: &dyn Fn(&mut [T])| {
            if self.tracks(v) {
                add_into(&mut grads[v.0], len_of(v), f);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &|d| axpy(d, g));
                send(*b, &|d| axpy(d, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|d| axpy(d, g));
                send(*b, &|d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, &|d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * vb[k];
                    }
                });
                send(*b, &|d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * va[k];
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|d| axpy(d, g)),
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, &|d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * c));
            }
            Op::Recip(a) => {
                let y = &node.value;
                send(*a, &|d| {
                    for k in 0..d.len() {
                        d[k] = d[k] - g[k] * y[k] * y[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let half = T::from_f64(0.5);
                send(*a, &|d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * half / y[k];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = T::from_f64(2.0);
                send(*a, &|d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + two * x[k] * g[k];
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, &|d| {
                    for k in 0..d.len() {
                        if x[k] > T::zero() {
                            d[k] = d[k] + g[k];
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &|d| d.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::from_usize(len_of(*a));
                send(*a, &|d| d.iter_mut().for_each(|x| *x = *x + s));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = G B^T, dB = A^T G
                send(*a, &|d| {
                    let bt = transposed(vb, k, n);
                    matmul_acc(g, &bt, d, m, n, k);
                });
                send(*b, &|d| {
                    let at = transposed(va, m, k);
                    matmul_acc(&at, g, d, k, m, n);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, &|d| axpy(d, &transposed(g, c, r)));
            }
            Op::LogSoftmax(a) => {
                let c = node.shape[1];
                let y = &node.value;
                send(*a, &|d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: T = gr.iter().copied().sum();
                        for k in 0..c {
                            dr[k] = dr[k] + gr[k] - yr[k].exp() * gs;
                        }
                    }
                });
            }
            Op::Gather(a, index) => {
                let c = self.shape(*a)[1];
                send(*a, &|d| {
                    for (n, &k) in index.iter().enumerate() {
                        d[n * c + k] = d[n * c + k] + g[n];
                    }
                });
            }
            Op::MaxPool { input, argmax } => send(*input, &|d| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
            }),
            Op::GlobalAvgPool(a) => {
                let inner = len_of(*a) / g.len().max(1);
                let scale = T::from_usize(inner).recip();
                send(*a, &|d| {
                    for (block, &gv) in d.chunks_mut(inner).zip(g) {
                        block.iter_mut().for_each(|x| *x = *x + gv * scale);
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                if self.tracks(*input) || self.tracks(*weight) {
                    let mut dx = if self.tracks(*input) {
                        vec![T::zero(); x.len()]
                    } else {
                        Vec::new()
                    };
                    let mut dw = if self.tracks(*weight) {
                        vec![T::zero(); w.len()]
                    } else {
                        Vec::new()
                    };
                    conv_backward(geom, x, w, g, &mut dx, &mut dw);
                    if !dx.is_empty() {
                        send(*input, &|d| axpy(d, &dx));
                    }
                    if !dw.is_empty() {
                        send(*weight, &|d| axpy(d, &dw));
                    }
                }
                if let Some(b) = bias {
                    let plane = geom.h_out * geom.w_out;
                    send(*b, &|d| {
                        for (i, block) in g.chunks(plane).enumerate() {
                            let co = i % geom.c_out;
                            d[co] = d[co] + block.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::ChannelMean(a) => {
                let (n, c, inner) = channel_dims(self.shape(*a)).expect("checked in forward");
                let count = T::from_usize(n * inner);
                send(*a, &|d| {
                    for (i, block) in d.chunks_mut(inner).enumerate() {
                        let s = g[i % c] / count;
                        block.iter_mut().for_each(|x| *x = *x + s);
                    }
                });
            }
            Op::ChannelVar { input, mean } => {
                // d var_c / d x = 2 (x - mean_c) / count; the mean's own
                // dependence on x cancels because the deviations sum to zero.
                let (n, c, inner) = channel_dims(self.shape(*input)).expect("checked in forward");
                let scale = T::from_f64(2.0) / T::from_usize(n * inner);
                let x = self.value(*input);
                send(*input, &|d| {
                    for (i, (block, xb)) in d.chunks_mut(inner).zip(x.chunks(inner)).enumerate() {
                        let ch = i % c;
                        let s = g[ch] * scale;
                        for (dv, &xv) in block.iter_mut().zip(xb) {
                            *dv = *dv + s * (xv - mean[ch]);
                        }
                    }
                });
            }
            Op::MulChannel(a, s) => {
                let (_, c, inner) = channel_dims(self.shape(*a)).expect("checked in forward");
                let inner = inner.max(1);
                let (va, vs) = (self.value(*a), self.value(*s));
                send(*a, &|d| {
                    for (i, (db, gb)) in d.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                        let k = vs[i % c];
                        db.iter_mut().zip(gb).for_each(|(x, &y)| *x = *x + y * k);
                    }
                });
                send(*s, &|d| {
                    for (i, (ab, gb)) in va.chunks(inner).zip(g.chunks(inner)).enumerate() {
                        let ch = i % c;
                        d[ch] = d[ch] + ab.iter().zip(gb).map(|(&x, &y)| x * y).sum::<T>();
                    }
                });
            }
            Op::AddChannel(a, b) => {
                let (_, c, inner) = channel_dims(self.shape(*a)).expect("checked in forward");
                let inner = inner.max(1);
                send(*a, &|d| axpy(d, g));
                send(*b, &|d| {
                    for (i, gb) in g.chunks(inner).enumerate() {
                        let ch = i % c;
                        d[ch] = d[ch] + gb.iter().copied().sum::<T>();
                    }
                });
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn transposed<T: Real>(v: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

/// `out[M, N] += a[M, K] * b[K, N]`.
fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Per-channel mean, accumulated relative to the channel's first element so
/// that a constant channel yields that constant exactly.
fn channel_mean_of<T: Real>(v: &[T], n: usize, c: usize, inner: usize) -> Vec<T> {
    let shift: Vec<T> = (0..c).map(|ch| v[ch * inner]).collect();
    let mut acc = vec![T::zero(); c];
    for (i, block) in v.chunks(inner).enumerate() {
        let ch = i % c;
        acc[ch] = acc[ch] + block.iter().map(|&x| x - shift[ch]).sum::<T>();
    }
    let count = T::from_usize(n * inner);
    acc.iter().zip(&shift).map(|(&a, &s)| s + a / count).collect()
}

/// Unfolds one sample `[Cin, H, W]` into `[Cin*kh*kw, Hout*Wout]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let plane = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * plane..(r + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let plane = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[r * plane..(r + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.h_out * g.w_out;
    let rows = g.c_in * g.kh * g.kw;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = vec![T::zero(); rows * plane];
    for s in 0..g.n {
        im2col(g, &x[s * in_len..(s + 1) * in_len], &mut col);
        let o = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (co, block) in o.chunks_mut(plane).enumerate() {
                block.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        matmul_acc(w, &col, o, g.c_out, rows, plane);
    }
    out
}

/// Accumulates input and weight gradients; an empty `dx`/`dw` is skipped.
fn conv_backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T], dx: &mut [T], dw: &mut [T]) {
    let plane = g.h_out * g.w_out;
    let rows = g.c_in * g.kh * g.kw;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut col = vec![T::zero(); rows * plane];
    let wt = if dx.is_empty() {
        Vec::new()
    } else {
        transposed(w, g.c_out, rows)
    };
    let mut dcol = vec![T::zero(); if dx.is_empty() { 0 } else { rows * plane }];
    for s in 0..g.n {
        let gs = &gout[s * out_len..(s + 1) * out_len];
        if !dw.is_empty() {
            im2col(g, &x[s * in_len..(s + 1) * in_len], &mut col);
            for co in 0..g.c_out {
                let gr = &gs[co * plane..(co + 1) * plane];
                let dwr = &mut dw[co * rows..(co + 1) * rows];
                for (r, d) in dwr.iter_mut().enumerate() {
                    let cr = &col[r * plane..(r + 1) * plane];
                    *d = *d + gr.iter().zip(cr).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        if !dx.is_empty() {
            dcol.iter_mut().for_each(|v| *v = T::zero());
            matmul_acc(&wt, gs, &mut dcol, rows, g.c_out, plane);
            col2im_add(g, &dcol, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
}
