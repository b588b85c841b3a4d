//! Binary PPM (`P6`) export for visual inspection of images.

use std::fs;
use std::path::Path;

use bninvert_core::train::Dataset;

use crate::error::{Error, Result};

/// Maps one CHW image to 8-bit RGB, min-max normalized over the whole image.
/// A constant image maps to 0. One-channel images are replicated to gray.
pub fn to_rgb8(image: &[f32], dims: [usize; 3]) -> Result<Vec<u8>> {
    let [c, h, w] = dims;
    if c != 1 && c != 3 {
        return Err(Error::usage(format!("cannot export {c}-channel images as PPM")));
    }
    if image.len() != c * h * w {
        return Err(Error::usage("image length does not match dims"));
    }
    let lo = image.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let q = |v: f32| {
        if range > 0.0 && range.is_finite() {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(q(image[(ch % c) * plane + p]));
        }
    }
    Ok(out)
}

pub fn encode(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_image(image: &[f32], dims: [usize; 3]) -> Result<Vec<u8>> {
    Ok(encode(dims[2], dims[1], &to_rgb8(image, dims)?))
}

/// Parses a `P6` file with maxval 255. Returns `(width, height, rgb)`.
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes.get(i)?.is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes.get(i)?.is_ascii_whitespace() {
            i += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?);
    }
    i += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let body = bytes.get(i..)?;
    (body.len() == w * h * 3).then(|| (w, h, body.to_vec()))
}

/// Writes up to `per_class` images of each class as `<class>_<index>.ppm`
/// (index is the position in the dataset) plus `grid.ppm`, one row per class.
/// Returns the number of single-image files written.
pub fn export_images(dir: &Path, data: &Dataset<f32>, per_class: usize) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims = data.image_shape();
    let [_, h, w] = dims;
    let classes = data.class_count();
    let mut picked: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels().iter().enumerate() {
        let row = &mut picked[l as usize];
        if row.len() < per_class {
            row.push(i);
        }
    }
    let gw = w * per_class.max(1);
    let mut grid = vec![0u8; gw * h * classes * 3];
    let mut written = 0;
    for (class, row) in picked.iter().enumerate() {
        for (col, &i) in row.iter().enumerate() {
            let rgb = to_rgb8(data.image(i), dims)?;
            let path = dir.join(format!("{class}_{i}.ppm"));
            fs::write(&path, encode(w, h, &rgb)).map_err(|e| Error::io(&path, e))?;
            written += 1;
            for y in 0..h {
                let dst = ((class * h + y) * gw + col * w) * 3;
                grid[dst..dst + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    let path = dir.join("grid.ppm");
    fs::write(&path, encode(gw, h * classes, &grid)).map_err(|e| Error::io(&path, e))?;
    Ok(written)
}
