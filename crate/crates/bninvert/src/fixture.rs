//! Procedural 4-class shape dataset used in place of a real image corpus.
//!
//! Each image is a noisy two-tone 3x16x16 picture holding one shape: a disk,
//! a hollow square, a plus or a diagonal cross. Position, size and colors are
//! random per image; the class is only recoverable from the shape.

use std::path::Path;

use bninvert_core::rng::{derive_seed, CounterRng};
use bninvert_core::train::Dataset;

use crate::error::Result;
use crate::formats::synd::{self, Manifest};

pub const CLASSES: usize = 4;
pub const DIMS: [usize; 3] = [3, 16, 16];
pub const TRAIN_SIZE: usize = 2000;
pub const TEST_SIZE: usize = 500;

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn inside(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match class {
        0 => dx * dx + dy * dy <= s * s,
        1 => {
            let m = ax.max(ay);
            m <= s && m >= s - 1.3
        }
        2 => (ax <= 1.0 && ay <= s) || (ay <= 1.0 && ax <= s),
        _ => (ax - ay).abs() <= 1.0 && ax.max(ay) <= s,
    }
}

pub fn render(class: usize, seed: u64) -> Vec<f32> {
    let [c, h, w] = DIMS;
    let mut rng = CounterRng::new(seed);
    let cx = 5.0 + 5.0 * rng.uniform();
    let cy = 5.0 + 5.0 * rng.uniform();
    let s = 3.0 + 2.0 * rng.uniform();
    let bg: Vec<f64> = (0..c).map(|_| 0.4 * rng.uniform()).collect();
    let fg: Vec<f64> = (0..c).map(|_| 0.5 + 0.5 * rng.uniform()).collect();
    let noise = rng.normals(c * h * w, 0.0, 0.1);
    let mut img = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let on = inside(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s);
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                let base = if on { fg[ch] } else { bg[ch] };
                img[i] = (base + noise[i]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn split(seed: u64, stream: u64, count: usize) -> Result<Dataset<f32>> {
    let mut labels: Vec<u16> = (0..count).map(|i| (i % CLASSES) as u16).collect();
    CounterRng::new(derive_seed(seed, stream << 32)).shuffle(&mut labels);
    let mut images = Vec::with_capacity(count * DIMS.iter().product::<usize>());
    for (i, &l) in labels.iter().enumerate() {
        images.extend(render(l as usize, derive_seed(seed, (stream << 32) | (i as u64 + 1))));
    }
    Ok(Dataset::new(DIMS, CLASSES, images, labels)?)
}

/// Returns raw `(train, test)` splits with pixel values in `[0, 1]`.
pub fn generate(seed: u64, train: usize, test: usize) -> Result<(Dataset<f32>, Dataset<f32>)> {
    Ok((split(seed, TRAIN_STREAM, train)?, split(seed, TEST_STREAM, test)?))
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(data: &Dataset<f32>) -> (Vec<f32>, Vec<f32>) {
    let [c, h, w] = data.image_shape();
    let plane = h * w;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let vals = || (0..data.len()).flat_map(move |i| data.image(i)[ch * plane..(ch + 1) * plane].iter());
        let n = (data.len() * plane) as f64;
        let m = vals().map(|&v| v as f64).sum::<f64>() / n;
        let v = vals().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        mean.push(m as f32);
        std.push(v.sqrt().max(1e-6) as f32);
    }
    (mean, std)
}

/// Generates the fixture and writes it as a `SYND` dataset into `dir`.
pub fn write_fixture(dir: &Path, seed: u64, train: usize, test: usize) -> Result<Manifest> {
    let (tr, te) = generate(seed, train, test)?;
    let mut manifest = Manifest::new("fixture", CLASSES, DIMS);
    let (mean, std) = channel_stats(&tr);
    manifest.norm_mean = mean;
    manifest.norm_std = std;
    manifest.extra.insert("fixture.seed".into(), seed.to_string());
    synd::write_dataset(dir, &mut manifest, &[("train", &tr), ("test", &te)])?;
    Ok(manifest)
}
