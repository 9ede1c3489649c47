//! Procedural shape images and the `BBTD` dataset container.
//!
//! ```text
//! "BBTD" version:u32 n:u32 classes:u32 channels:u32 height:u32 width:u32
//! labels: u8 * n
//! pixels: f32 * (n * channels * height * width), little-endian, in [0, 1]
//! ```

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{read_u32, Tensor};

pub const IMAGE_SIZE: usize = 16;
pub const MAX_CLASSES: usize = 6;
const SUPERSAMPLE: usize = 2;

const MAGIC: &[u8; 4] = b"BBTD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDataset {
    /// `(n, channels, height, width)` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ShapeDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be (n, c, h, w), got {:?}",
                images.shape()
            )));
        }
        if labels.len() != images.batch_size() {
            return Err(Error::LengthMismatch {
                expected: images.batch_size(),
                actual: labels.len(),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Self::new(
            self.images.select(&idx)?,
            self.labels[..idx.len()].to_vec(),
            self.num_classes,
        )
    }

    /// Average-pools every image by `factor` in both spatial dimensions.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let &[n, c, h, w] = self.images.shape() else {
            unreachable!("checked in new")
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot pool {h}x{w} by {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let src = self.images.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
            let base = plane * h * w;
            for y in 0..h {
                for x in 0..w {
                    dst[(y / factor) * ow + x / factor] += src[base + y * w + x] * norm;
                }
            }
        }
        Self::new(
            Tensor::new(vec![n, c, oh, ow], out)?,
            self.labels.clone(),
            self.num_classes,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    cos: f64,
    sin: f64,
}

/// Whether the point `(u, v)` in shape-local units lies inside `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        // bar
        0 => u.abs() <= 5.0 && v.abs() <= 1.3,
        // cross
        1 => (u.abs() <= 1.2 && v.abs() <= 5.0) || (v.abs() <= 1.2 && u.abs() <= 5.0),
        // disk
        2 => r <= 4.3,
        // ring
        3 => (2.7..=4.8).contains(&r),
        // frame
        4 => {
            let m = u.abs().max(v.abs());
            (3.0..=4.6).contains(&m)
        }
        // diagonal stroke
        _ => ((u - v).abs() / 2f64.sqrt() <= 1.2) && (u + v).abs() <= 6.5,
    }
}

fn render(class: usize, pose: Pose, fg: f64, bg: f64, out: &mut [f64]) {
    let step = 1.0 / SUPERSAMPLE as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step - pose.cx;
                    let y = py as f64 + (sy as f64 + 0.5) * step - pose.cy;
                    let u = (pose.cos * x + pose.sin * y) / pose.scale;
                    let v = (-pose.sin * x + pose.cos * y) / pose.scale;
                    if inside(class, u, v) {
                        cover += weight;
                    }
                }
            }
            out[py * IMAGE_SIZE + px] = bg + (fg - bg) * cover;
        }
    }
}

/// Generates `n` single-channel 16x16 images over `classes` shape kinds,
/// balanced to within one sample per class and shuffled.
pub fn generate_dataset(n: usize, classes: usize, seed: u64) -> Result<ShapeDataset> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "classes must lie in 2..={MAX_CLASSES}, got {classes}"
        )));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {classes} samples, got {n}"
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut stream(seed, Purpose::Dataset, &[0]));
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; n * plane];
    for (i, (&class, out)) in labels.iter().zip(data.chunks_mut(plane)).enumerate() {
        let mut rng = stream(seed, Purpose::Dataset, &[1, i as u64]);
        let angle = rng.random_range(-0.35..0.35)
            + if class == 0 && rng.random_bool(0.5) {
                PI / 2.0
            } else {
                0.0
            };
        let pose = Pose {
            cx: 8.0 + rng.random_range(-1.5..1.5),
            cy: 8.0 + rng.random_range(-1.5..1.5),
            scale: rng.random_range(0.85..1.15),
            cos: angle.cos(),
            sin: angle.sin(),
        };
        let fg = rng.random_range(0.65..1.0);
        let bg = rng.random_range(0.0..0.25);
        render(class, pose, fg, bg, out);
    }
    let images = Tensor::new(vec![n, 1, IMAGE_SIZE, IMAGE_SIZE], data)?;
    ShapeDataset::new(images, labels, classes)
}

pub fn write_dataset<W: Write>(ds: &ShapeDataset, mut w: W) -> Result<()> {
    if ds.num_classes > 256 {
        return Err(Error::InvalidArgument("labels must fit in one byte".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let s = ds.images.shape();
    for v in [s[0], ds.num_classes, s[1], s[2], s[3]] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    w.write_all(&labels)?;
    for &v in ds.images.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<ShapeDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let [n, classes, c, h, w] = dims;
    if n == 0 || classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate dataset header {dims:?}")));
    }
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)?;
    let count = n * c * h * w;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    let pixels: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("pixel outside [0, 1]".into()));
    }
    let images = Tensor::new(vec![n, c, h, w], pixels)?;
    ShapeDataset::new(
        images,
        labels.into_iter().map(usize::from).collect(),
        classes,
    )
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(ds: &ShapeDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ShapeDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
