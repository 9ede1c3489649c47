//! Image corruptions with five severity levels (severity 0 is the identity).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::ShapeDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    BoxBlur,
    Contrast,
    Pixelate,
    ImpulseNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::ImpulseNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::ImpulseNoise => "impulse_noise",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    /// 0 (identity) through 5.
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::InvalidArgument(format!(
                "severity must be 0..=5, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.08, 0.16, 0.24, 0.32, 0.40];
const SHOT_RATE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const CONTRAST: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
const PIXELATE: [usize; 5] = [12, 10, 8, 6, 4];
const IMPULSE: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];

fn box_blur(img: &mut [f64], h: usize, w: usize) {
    let src = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += src[yy * w + xx];
                }
            }
            img[y * w + x] = acc / 9.0;
        }
    }
}

fn pixelate(img: &mut [f64], h: usize, w: usize, res: usize) {
    let cell = |p: usize, len: usize| p * res / len;
    let mut sums = vec![0.0; res * res];
    let mut counts = vec![0usize; res * res];
    for y in 0..h {
        for x in 0..w {
            let k = cell(y, h) * res + cell(x, w);
            sums[k] += img[y * w + x];
            counts[k] += 1;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let k = cell(y, h) * res + cell(x, w);
            img[y * w + x] = sums[k] / counts[k] as f64;
        }
    }
}

/// Corrupts one image plane-by-plane. `rng` drives the noise kinds.
fn corrupt_image<R: Rng>(
    img: &mut [f64],
    planes: usize,
    h: usize,
    w: usize,
    c: Corruption,
    rng: &mut R,
) {
    if c.severity == 0 {
        return;
    }
    let s = c.severity as usize - 1;
    match c.kind {
        CorruptionKind::GaussianNoise => {
            for v in img.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += GAUSSIAN_SIGMA[s] * z;
            }
        }
        CorruptionKind::ShotNoise => {
            let k = SHOT_RATE[s];
            for v in img.iter_mut() {
                let lambda = (*v * k).max(0.0);
                *v = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(rng) / k
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::BoxBlur => {
            for plane in img.chunks_mut(h * w).take(planes) {
                for _ in 0..=s {
                    box_blur(plane, h, w);
                }
            }
        }
        CorruptionKind::Contrast => {
            for plane in img.chunks_mut(h * w).take(planes) {
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                for v in plane.iter_mut() {
                    *v = mean + (*v - mean) * CONTRAST[s];
                }
            }
        }
        CorruptionKind::Pixelate => {
            let res = PIXELATE[s] * h.min(w) / 16;
            for plane in img.chunks_mut(h * w).take(planes) {
                pixelate(plane, h, w, res.max(1));
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in img.iter_mut() {
                if rng.random_bool(IMPULSE[s]) {
                    *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Applies `c` to every image; labels are untouched.
pub fn corrupt(ds: &ShapeDataset, c: Corruption, seed: u64) -> Result<ShapeDataset> {
    let c = Corruption::new(c.kind, c.severity)?;
    let shape = ds.sample_shape().to_vec();
    let (planes, h, w) = (shape[0], shape[1], shape[2]);
    let mut images = ds.images.clone();
    let kind_id = CorruptionKind::ALL
        .iter()
        .position(|k| *k == c.kind)
        .unwrap() as u64;
    for i in 0..ds.len() {
        let mut rng = stream(
            seed,
            Purpose::Corruption,
            &[kind_id, c.severity as u64, i as u64],
        );
        corrupt_image(images.sample_mut(i), planes, h, w, c, &mut rng);
    }
    ShapeDataset::new(images, ds.labels.clone(), ds.num_classes)
}

/// Mean per-image L2 distance between two datasets of equal shape.
pub fn mean_l2_distance(a: &ShapeDataset, b: &ShapeDataset) -> f64 {
    let n = a.len();
    (0..n)
        .map(|i| {
            a.images
                .sample(i)
                .iter()
                .zip(b.images.sample(i))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}
