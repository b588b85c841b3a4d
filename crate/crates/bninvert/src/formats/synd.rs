//! `SYND` v1 datasets: a `key=value` manifest plus one image blob and one
//! label blob per split.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bninvert_core::train::Dataset;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const IMAGE_MAGIC: &[u8; 4] = b"SYND";
const LABEL_MAGIC: &[u8; 4] = b"SYNL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
    pub images: String,
    pub images_crc32: u32,
    pub labels: String,
    pub labels_crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub class_count: usize,
    pub dims: [usize; 3],
    /// Per-channel normalization applied on load: `(x - mean) / std`.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub splits: Vec<SplitEntry>,
    /// Free-form metadata (provenance, export notes). Keys keep sorted order.
    pub extra: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(name: &str, class_count: usize, dims: [usize; 3]) -> Self {
        Manifest {
            name: name.to_string(),
            class_count,
            dims,
            norm_mean: vec![0.0; dims[0]],
            norm_std: vec![1.0; dims[0]],
            splits: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn Display| out.push_str(&format!("{k}={v}\n"));
        kv("format", &"SYND");
        kv("version", &VERSION);
        kv("name", &self.name);
        kv("classes", &self.class_count);
        kv("dims", &join(&self.dims));
        kv("norm_mean", &join(&self.norm_mean));
        kv("norm_std", &join(&self.norm_std));
        let names: Vec<&str> = self.splits.iter().map(|s| s.name.as_str()).collect();
        kv("splits", &names.join(","));
        for s in &self.splits {
            kv(&format!("{}.count", s.name), &s.count);
            kv(&format!("{}.images", s.name), &s.images);
            kv(&format!("{}.images.crc32", s.name), &format!("{:08x}", s.images_crc32));
            kv(&format!("{}.labels", s.name), &s.labels);
            kv(&format!("{}.labels.crc32", s.name), &format!("{:08x}", s.labels_crc32));
        }
        for (k, v) in &self.extra {
            kv(k, v);
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::format(path, format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::format(path, format!("missing key {k}")));
        if take("format")? != "SYND" {
            return Err(Error::format(path, "not a SYND manifest"));
        }
        let version: u32 = parse_value(&take("version")?, "version", path)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let name = take("name")?;
        let class_count = parse_value(&take("classes")?, "classes", path)?;
        let dims: Vec<usize> = parse_list(&take("dims")?, "dims", path)?;
        let dims: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::format(path, "dims must have three entries"))?;
        let norm_mean = parse_list(&take("norm_mean")?, "norm_mean", path)?;
        let norm_std: Vec<f32> = parse_list(&take("norm_std")?, "norm_std", path)?;
        if norm_mean.len() != dims[0] || norm_std.len() != dims[0] {
            return Err(Error::format(path, "normalization needs one value per channel"));
        }
        if norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::format(path, "norm_std must be positive"));
        }
        let split_names = take("splits")?;
        let mut splits = Vec::new();
        for s in split_names.split(',').filter(|s| !s.is_empty()) {
            let mut key = |suffix: &str| take(&format!("{s}.{suffix}"));
            splits.push(SplitEntry {
                name: s.to_string(),
                count: parse_value(&key("count")?, "count", path)?,
                images: key("images")?,
                images_crc32: parse_crc(&key("images.crc32")?, path)?,
                labels: key("labels")?,
                labels_crc32: parse_crc(&key("labels.crc32")?, path)?,
            });
        }
        Ok(Manifest { name, class_count, dims, norm_mean, norm_std, splits, extra: map })
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_value<T: FromStr>(s: &str, key: &str, path: &Path) -> Result<T> {
    s.parse().map_err(|_| Error::format(path, format!("bad value for {key}: {s:?}")))
}

fn parse_list<T: FromStr>(s: &str, key: &str, path: &Path) -> Result<Vec<T>> {
    s.split(',').map(|x| parse_value(x.trim(), key, path)).collect()
}

fn parse_crc(s: &str, path: &Path) -> Result<u32> {
    u32::from_str_radix(s, 16).map_err(|_| Error::format(path, format!("bad checksum {s:?}")))
}

/// Accepts either a manifest file or the directory holding one.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn encode_images(images: &[f32], count: usize, dims: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + images.len() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, format!("truncated at byte {at}")))
}

/// Returns `(count, dims, values)`.
pub fn decode_images(bytes: &[u8], path: &Path) -> Result<(usize, [usize; 3], Vec<f32>)> {
    if bytes.get(..4) != Some(IMAGE_MAGIC) {
        return Err(Error::format(path, "bad image blob magic"));
    }
    let version = read_u32(bytes, 4, path)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported image blob version {version}")));
    }
    let count = read_u32(bytes, 8, path)? as usize;
    let dims = [
        read_u32(bytes, 12, path)? as usize,
        read_u32(bytes, 16, path)? as usize,
        read_u32(bytes, 20, path)? as usize,
    ];
    let expect = count * dims.iter().product::<usize>();
    let body = &bytes[24..];
    if body.len() != expect * 4 {
        return Err(Error::format(path, format!("expected {expect} values, found {} bytes", body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((count, dims, values))
}

pub fn encode_labels(labels: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len() * 2);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Vec<u16>> {
    if bytes.get(..4) != Some(LABEL_MAGIC) {
        return Err(Error::format(path, "bad label blob magic"));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count * 2 {
        return Err(Error::format(path, format!("expected {count} labels, found {} bytes", body.len())));
    }
    Ok(body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes the blobs for each split into `dir` and then the manifest.
/// `manifest.splits` is replaced.
pub fn write_dataset(dir: &Path, manifest: &mut Manifest, splits: &[(&str, &Dataset<f32>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.splits.clear();
    for (name, data) in splits {
        if data.image_shape() != manifest.dims || data.class_count() != manifest.class_count {
            return Err(Error::usage(format!("split {name} does not match the manifest layout")));
        }
        let images = encode_images(data.images(), data.len(), manifest.dims);
        let labels = encode_labels(data.labels());
        let entry = SplitEntry {
            name: name.to_string(),
            count: data.len(),
            images: format!("{name}-images.bin"),
            images_crc32: crc32fast::hash(&images),
            labels: format!("{name}-labels.bin"),
            labels_crc32: crc32fast::hash(&labels),
        };
        write_file(&dir.join(&entry.images), &images)?;
        write_file(&dir.join(&entry.labels), &labels)?;
        manifest.splits.push(entry);
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = manifest_path(path);
    if !path.exists() {
        return Err(Error::usage(format!("dataset not found: {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

/// Loads one split as stored, without normalization.
pub fn read_split(manifest_file: &Path, manifest: &Manifest, name: &str) -> Result<Dataset<f32>> {
    let entry = manifest
        .split(name)
        .ok_or_else(|| Error::usage(format!("dataset has no {name:?} split")))?;
    let dir = manifest_file.parent().unwrap_or(Path::new("."));
    let ipath = dir.join(&entry.images);
    let lpath = dir.join(&entry.labels);
    let ibytes = read_file(&ipath)?;
    if crc32fast::hash(&ibytes) != entry.images_crc32 {
        return Err(Error::format(&ipath, "checksum mismatch"));
    }
    let lbytes = read_file(&lpath)?;
    if crc32fast::hash(&lbytes) != entry.labels_crc32 {
        return Err(Error::format(&lpath, "checksum mismatch"));
    }
    let (count, dims, images) = decode_images(&ibytes, &ipath)?;
    let labels = decode_labels(&lbytes, &lpath)?;
    if dims != manifest.dims {
        return Err(Error::format(&ipath, format!("dims {dims:?} differ from manifest {:?}", manifest.dims)));
    }
    if count != entry.count || labels.len() != count {
        return Err(Error::format(&ipath, "sample count differs from manifest"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= manifest.class_count) {
        return Err(Error::format(&lpath, format!("label {bad} out of range")));
    }
    Ok(Dataset::new(dims, manifest.class_count, images, labels)?)
}
