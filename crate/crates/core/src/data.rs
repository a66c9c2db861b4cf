//! Synthetic labeled image sets stored as one `f32` blob plus a JSON index.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.bin";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Class = shape type (disk, square, cross, ring, ...), random placement,
    /// size and colour over a noisy background.
    Shapes,
    /// Class = spatial frequency of an oriented sinusoid plus noise.
    GaussianTextures,
}

fn default_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub generator: Generator,
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

pub const MAX_SHAPE_CLASSES: usize = 8;

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("$.num_samples", "must be positive"));
        }
        if self.image_size < 4 {
            return Err(Error::config("$.image_size", "must be at least 4"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("$.num_classes", "need at least 2 classes"));
        }
        if self.generator == Generator::Shapes && self.num_classes > MAX_SHAPE_CLASSES {
            return Err(Error::config(
                "$.num_classes",
                format!("the shapes generator has {MAX_SHAPE_CLASSES} shape types"),
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("$.channels", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: Option<SyntheticDatasetSpec>,
    pub num_samples: usize,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// Per-channel statistics removed during normalization.
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
    pub blob: String,
    pub blob_sha256: String,
}

/// Images `[C, H, W]` (row-major, contiguous) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(channels: usize, image_size: usize, num_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {} images of {per}", images.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            channels,
            image_size,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.channels, self.image_size, self.image_size], self.image(i).to_vec()).unwrap()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[B, C, H, W]` batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.image_size, self.image_size], data).unwrap()
    }

    /// Samples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let n = self.image_len();
        Dataset {
            channels: self.channels,
            image_size: self.image_size,
            num_classes: self.num_classes,
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn blob(&self) -> Vec<u8> {
        self.images.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn save(&self, dir: &Path, spec: Option<&SyntheticDatasetSpec>, stats: (Vec<f32>, Vec<f32>)) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = self.blob();
        let index = DatasetIndex {
            spec: spec.cloned(),
            num_samples: self.len(),
            channels: self.channels,
            image_size: self.image_size,
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            channel_mean: stats.0,
            channel_std: stats.1,
            blob: IMAGES_FILE.into(),
            blob_sha256: sha256_hex(&blob),
        };
        let bp = dir.join(IMAGES_FILE);
        fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
        let ip = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&ip, text).map_err(|e| Error::io(&ip, e))
    }

    pub fn load(dir: &Path) -> Result<(Dataset, DatasetIndex)> {
        let ip = dir.join(INDEX_FILE);
        let text = fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: DatasetIndex = serde_json::from_slice(&text).map_err(|e| Error::Json {
            path: ip.clone(),
            message: e.to_string(),
        })?;
        let bp = dir.join(&index.blob);
        let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        if sha256_hex(&blob) != index.blob_sha256 {
            return Err(Error::Checkpoint(format!("{} does not match its index checksum", bp.display())));
        }
        if blob.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{} is not a whole number of f32 values", bp.display())));
        }
        let images = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let ds = Dataset::new(index.channels, index.image_size, index.num_classes, images, index.labels.clone())?;
        Ok((ds, index))
    }
}

fn shape_mask(class: usize, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let thick = (r * 0.35).max(0.8);
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => (dx.abs() <= thick * 0.6 && dy.abs() <= r) || (dy.abs() <= thick * 0.6 && dx.abs() <= r),
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r - thick
        }
        4 => dy.abs() <= thick * 0.6 && dx.abs() <= r * 1.2,
        5 => dx.abs() <= thick * 0.6 && dy.abs() <= r * 1.2,
        6 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.5,
        _ => (dx - dy).abs() <= thick * 0.8 && dx.abs() <= r,
    }
}

fn render(spec: &SyntheticDatasetSpec, class: usize, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let s = spec.image_size;
    let sf = s as f32;
    let noise = Normal::new(0.0f32, 0.15).unwrap();
    match spec.generator {
        Generator::Shapes => {
            let r = sf * rng.random_range(0.22..0.34);
            let cx = rng.random_range(r..sf - r);
            let cy = rng.random_range(r..sf - r);
            let bg: Vec<f32> = (0..spec.channels).map(|_| rng.random_range(-0.3..0.3)).collect();
            let fg: Vec<f32> = (0..spec.channels).map(|_| rng.random_range(0.5..1.0)).collect();
            for c in 0..spec.channels {
                for y in 0..s {
                    for x in 0..s {
                        let inside = shape_mask(class, x as f32 + 0.5, y as f32 + 0.5, cx, cy, r);
                        let base = if inside { fg[c] } else { bg[c] };
                        out[(c * s + y) * s + x] = base + noise.sample(rng);
                    }
                }
            }
        }
        Generator::GaussianTextures => {
            // Frequencies spread over [1, s/4] cycles per image.
            let span = (sf / 4.0 - 1.0).max(1.0);
            let freq = 1.0 + span * class as f32 / (spec.num_classes - 1) as f32;
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let (ux, uy) = (theta.cos(), theta.sin());
            let w = std::f32::consts::TAU * freq / sf;
            for c in 0..spec.channels {
                let gain = rng.random_range(0.6..1.0);
                for y in 0..s {
                    for x in 0..s {
                        let t = (x as f32 * ux + y as f32 * uy) * w + phase;
                        out[(c * s + y) * s + x] = gain * t.sin() + noise.sample(rng);
                    }
                }
            }
        }
    }
}

/// Generates the set and normalizes each channel to zero mean, unit
/// variance. Returns the dataset and the removed `(mean, std)` per channel.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<(Dataset, (Vec<f32>, Vec<f32>))> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.num_samples).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let per = spec.channels * spec.image_size * spec.image_size;
    let mut images = vec![0.0f32; per * spec.num_samples];
    for (i, &l) in labels.iter().enumerate() {
        render(spec, l, &mut rng, &mut images[i * per..(i + 1) * per]);
    }
    let plane = spec.image_size * spec.image_size;
    let mut mean = vec![0.0f32; spec.channels];
    let mut std = vec![0.0f32; spec.channels];
    for c in 0..spec.channels {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for i in 0..spec.num_samples {
            for &v in &images[i * per + c * plane..i * per + (c + 1) * plane] {
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        let n = (spec.num_samples * plane) as f64;
        let m = s / n;
        let sd = (s2 / n - m * m).max(1e-12).sqrt();
        mean[c] = m as f32;
        std[c] = sd as f32;
        for i in 0..spec.num_samples {
            for v in &mut images[i * per + c * plane..i * per + (c + 1) * plane] {
                *v = ((*v as f64 - m) / sd) as f32;
            }
        }
    }
    let ds = Dataset::new(spec.channels, spec.image_size, spec.num_classes, images, labels)?;
    Ok((ds, (mean, std)))
}
