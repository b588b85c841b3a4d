//! `BNCK` v1 checkpoint codec.
//!
//! ```text
//! "BNCK" | u32 version = 1 | u32 layer count
//! per layer: u8 kind tag | u32 rank | rank x u32 dims
//!            then per parameter buffer: u32 rank | rank x u32 dims | f32 values
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The first layer is an `Input`
//! record whose dims are the per-sample `[C, H, W]` shape. Layer dims carry
//! hyperparameters: `[stride, padding]` for conv, `[size]` for max pooling,
//! `[child count]` for a residual block, whose children follow it
//! recursively. Parameter buffers appear in the order conv/linear: weight,
//! bias; BatchNorm: gamma, beta, running_mean, running_var. BatchNorm
//! momentum and eps are not stored; loading restores the defaults.

use alloc::format;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use super::{BatchNorm, Conv, Layer, Linear, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BNCK";
pub const VERSION: u32 = 1;

const TAG_INPUT: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_LINEAR: u8 = 2;
const TAG_BATCHNORM: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_MAXPOOL: u8 = 5;
const TAG_GAP: u8 = 6;
const TAG_RESIDUAL: u8 = 7;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_header(out: &mut Vec<u8>, tag: u8, dims: &[usize]) {
    out.push(tag);
    put_u32(out, dims.len());
    dims.iter().for_each(|&d| put_u32(out, d));
}

fn put_buffer(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len());
    t.shape().iter().for_each(|&d| put_u32(out, d));
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_layers(out: &mut Vec<u8>, layers: &[Layer<f32>]) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                put_header(out, TAG_CONV, &[c.stride, c.padding]);
                put_buffer(out, &c.weight);
                put_buffer(out, &c.bias);
            }
            Layer::Linear(l) => {
                put_header(out, TAG_LINEAR, &[]);
                put_buffer(out, &l.weight);
                put_buffer(out, &l.bias);
            }
            Layer::BatchNorm(bn) => {
                put_header(out, TAG_BATCHNORM, &[]);
                put_buffer(out, &bn.gamma);
                put_buffer(out, &bn.beta);
                put_buffer(out, &bn.running_mean);
                put_buffer(out, &bn.running_var);
            }
            Layer::Relu => put_header(out, TAG_RELU, &[]),
            Layer::MaxPool(s) => put_header(out, TAG_MAXPOOL, &[*s]),
            Layer::GlobalAvgPool => put_header(out, TAG_GAP, &[]),
            Layer::Residual(body) => {
                put_header(out, TAG_RESIDUAL, &[body.len()]);
                put_layers(out, body);
            }
        }
    }
}

/// Serializes a model into `BNCK` v1 bytes.
pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.layers().len() + 1);
    put_header(&mut out, TAG_INPUT, &model.input_shape());
    put_layers(&mut out, model.layers());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// SHA-256 of the encoded model.
pub fn model_digest(model: &Model<f32>) -> [u8; 32] {
    Sha256::digest(encode(model)).into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let at = self.pos;
        let rank = self.u32(what)?;
        if rank > 8 {
            return Err(Error::format(at, format!("implausible rank {rank} for {what}")));
        }
        (0..rank).map(|_| self.u32(what)).collect()
    }

    fn header(&mut self, expected_rank: usize) -> Result<Vec<usize>> {
        let at = self.pos;
        let dims = self.dims("layer dims")?;
        if dims.len() != expected_rank {
            return Err(Error::format(
                at,
                format!("layer dims have rank {}, expected {expected_rank}", dims.len()),
            ));
        }
        Ok(dims)
    }

    fn buffer(&mut self, what: &str, grad: bool) -> Result<Tensor<f32>> {
        let at = self.pos;
        let shape = self.dims(what)?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (self.bytes.len() - self.pos) / 4)
            .ok_or_else(|| Error::format(at, format!("{what} of shape {shape:?} exceeds the file")))?;
        let raw = self.take(4 * n, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::from_vec(&shape, data)?.with_grad(grad))
    }

    fn layers(&mut self, count: usize, depth: usize) -> Result<Vec<Layer<f32>>> {
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = self.pos;
            let layer = match self.u8("layer tag")? {
                TAG_CONV => {
                    let d = self.header(2)?;
                    Layer::Conv(Conv {
                        weight: self.buffer("conv weight", true)?,
                        bias: self.buffer("conv bias", true)?,
                        stride: d[0],
                        padding: d[1],
                    })
                }
                TAG_LINEAR => {
                    self.header(0)?;
                    Layer::Linear(Linear {
                        weight: self.buffer("linear weight", true)?,
                        bias: self.buffer("linear bias", true)?,
                    })
                }
                TAG_BATCHNORM => {
                    self.header(0)?;
                    let mut bn = BatchNorm::new(0);
                    bn.gamma = self.buffer("bn gamma", true)?;
                    bn.beta = self.buffer("bn beta", true)?;
                    bn.running_mean = self.buffer("bn running_mean", false)?;
                    let var_at = self.pos;
                    bn.running_var = self.buffer("bn running_var", false)?;
                    if bn.running_var.data().iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::format(var_at, "negative running variance"));
                    }
                    Layer::BatchNorm(bn)
                }
                TAG_RELU => {
                    self.header(0)?;
                    Layer::Relu
                }
                TAG_MAXPOOL => Layer::MaxPool(self.header(1)?[0]),
                TAG_GAP => {
                    self.header(0)?;
                    Layer::GlobalAvgPool
                }
                TAG_RESIDUAL => {
                    if depth > 16 {
                        return Err(Error::format(at, "residual nesting too deep"));
                    }
                    let n = self.header(1)?[0];
                    Layer::Residual(self.layers(n, depth + 1)?)
                }
                other => return Err(Error::format(at, format!("unknown layer tag {other}"))),
            };
            layers.push(layer);
        }
        Ok(layers)
    }
}

/// Parses `BNCK` v1 bytes. Errors name the byte offset of the problem.
pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected BNCK"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if bytes.len() < 12 + 4 {
        return Err(Error::format(bytes.len(), "truncated before checksum"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes([bytes[body_end], bytes[body_end + 1], bytes[body_end + 2], bytes[body_end + 3]]);
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let count = r.u32("layer count")?;
    let at = r.pos;
    if r.u8("layer tag")? != TAG_INPUT {
        return Err(Error::format(at, "first layer must be the input record"));
    }
    let input = r.header(3)?;
    let layers = r.layers(count.saturating_sub(1), 0)?;
    if r.pos != body_end {
        return Err(Error::format(r.pos, "trailing bytes before checksum"));
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::format(body_end, "checksum mismatch"));
    }
    Model::from_layers([input[0], input[1], input[2]], layers).map_err(|e| Error::format(8, format!("{e}")))
}
