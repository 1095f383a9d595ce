//! Procedural 10-class image dataset.
//!
//! Every sample is drawn from its own ChaCha8 stream (seeded by the dataset
//! seed, stream = sample index), so a sample depends only on `(seed, index,
//! resolution)`. Labels cycle `index % 10`, which keeps classes balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Class names in label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "anti-diagonal-stripes",
    "disk",
    "ring",
    "plus",
    "cross",
    "checker",
    "square",
];

const NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub resolution: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 2000,
            resolution: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    /// `[n, 3, r, r]`, row-major.
    images: Vec<f32>,
    labels: Vec<usize>,
}

/// Draws the foreground mask of class `label` on normalized coordinates.
struct Shape {
    label: usize,
    cx: f64,
    cy: f64,
    size: f64,
    period: f64,
    phase: f64,
}

impl Shape {
    fn draw(label: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            label,
            cx: rng.random_range(0.35..0.65),
            cy: rng.random_range(0.35..0.65),
            size: rng.random_range(0.22..0.38),
            period: rng.random_range(0.16..0.3),
            phase: rng.random_range(0.0..1.0),
        }
    }

    /// `true` where the pixel at normalized `(x, y)` is foreground.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let s = self.size;
        let bar = 0.3 * s;
        let stripe = |t: f64| (t / self.period + self.phase).rem_euclid(1.0) < 0.5;
        match self.label {
            0 => stripe(y),
            1 => stripe(x),
            2 => stripe((x + y) / std::f64::consts::SQRT_2),
            3 => stripe((x - y) / std::f64::consts::SQRT_2),
            4 => dx.hypot(dy) < s,
            5 => {
                let r = dx.hypot(dy);
                r < s && r > 0.6 * s
            }
            6 => (dx.abs() < bar && dy.abs() < s) || (dy.abs() < bar && dx.abs() < s),
            7 => {
                let (u, v) = ((dx + dy) / std::f64::consts::SQRT_2, (dx - dy) / std::f64::consts::SQRT_2);
                (u.abs() < bar && v.abs() < s) || (v.abs() < bar && u.abs() < s)
            }
            8 => stripe(x) != stripe(y),
            _ => dx.abs() < 0.8 * s && dy.abs() < 0.8 * s,
        }
    }
}

fn render(seed: u64, index: usize, resolution: usize, out: &mut [f32]) -> usize {
    let label = index % NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let shape = Shape::draw(label, &mut rng);
    let mut bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let mut fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.65..1.0));
    if rng.random_bool(0.5) {
        std::mem::swap(&mut bg, &mut fg);
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let plane = resolution * resolution;
    for py in 0..resolution {
        for px in 0..resolution {
            let x = (px as f64 + 0.5) / resolution as f64;
            let y = (py as f64 + 0.5) / resolution as f64;
            let color = if shape.contains(x, y) { &fg } else { &bg };
            for (ch, &c) in color.iter().enumerate() {
                let v = c + noise.sample(&mut rng);
                out[ch * plane + py * resolution + px] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    label
}

pub fn gen_toy_dataset(config: &DatasetConfig) -> Result<ToyDataset> {
    if config.resolution == 0 {
        return Err(Error::invalid("dataset", "resolution must be positive"));
    }
    let per = 3 * config.resolution * config.resolution;
    let mut images = vec![0f32; config.n_samples * per];
    let labels = images
        .chunks_mut(per)
        .enumerate()
        .map(|(i, out)| render(config.seed, i, config.resolution, out))
        .collect();
    Ok(ToyDataset {
        config: config.clone(),
        images,
        labels,
    })
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Pixel data of sample `i`, `[3, r, r]`.
    pub fn image(&self, i: usize) -> &[f32] {
        let per = 3 * self.resolution() * self.resolution();
        &self.images[i * per..(i + 1) * per]
    }

    /// Stacks the given samples into `[len, 3, r, r]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let r = self.resolution();
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(
                    "dataset",
                    format!("sample {i} out of range for {} samples", self.len()),
                ));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), 3, r, r], data)?, labels))
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Little-endian image bytes followed by one byte per label.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.extend(self.labels.iter().map(|&l| l as u8));
        out
    }
}
