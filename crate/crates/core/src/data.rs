//! Seeded synthetic four-class image task and its on-disk dataset format.
//!
//! Class `c` has bits `(b1, b0)`: `b1` picks horizontal (0) or vertical (1)
//! stripes of period 16 covering the whole image, `b0` adds a 4×4 marker of
//! value 1.0 at a uniform position. Telling the classes apart needs both the
//! coarse stripe orientation and the fine marker. Gaussian noise (σ = 0.1) is
//! added and values are clipped to `[0, 1]`.
//!
//! A dataset directory holds one tensor container per sample (single tensor
//! named `image`, shape `3×64×64`) and a header-less `labels.csv` of
//! `filename,label` lines.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{read_tensors, write_tensors};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LABELS_FILE: &str = "labels.csv";
pub const IMAGE_TENSOR: &str = "image";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub stripe_period: usize,
    pub stripe_low: f32,
    pub stripe_high: f32,
    pub marker_size: usize,
    pub marker_value: f32,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(seed: u64) -> Self {
        SyntheticSpec {
            num_classes: 4,
            channels: 3,
            size: 64,
            stripe_period: 16,
            stripe_low: 0.25,
            stripe_high: 0.75,
            marker_size: 4,
            marker_value: 1.0,
            noise_std: 0.1,
            seed,
        }
    }

    pub fn stripe_value(&self, vertical: bool, y: usize, x: usize) -> f32 {
        let t = if vertical { x } else { y };
        if t % self.stripe_period < self.stripe_period / 2 {
            self.stripe_low
        } else {
            self.stripe_high
        }
    }
}

/// One generated sample before serialization.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    /// Top-left corner `(y, x)` of the marker, when present.
    pub marker: Option<(usize, usize)>,
}

/// Balanced label sequence in seeded order: each class appears `n / classes`
/// or one more time.
fn labels(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    labels
}

fn render(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let (s, c) = (spec.size, spec.channels);
    let vertical = label & 2 != 0;
    let marker = (label & 1 != 0).then(|| {
        let hi = s - spec.marker_size;
        (rng.random_range(0..=hi), rng.random_range(0..=hi))
    });
    let noise = Normal::new(0.0, spec.noise_std).expect("valid std");
    let mut data = Vec::with_capacity(c * s * s);
    for _ in 0..c {
        for y in 0..s {
            for x in 0..s {
                let inside = marker.is_some_and(|(my, mx)| {
                    (my..my + spec.marker_size).contains(&y) && (mx..mx + spec.marker_size).contains(&x)
                });
                let base = if inside { spec.marker_value } else { spec.stripe_value(vertical, y, x) };
                let v = base as f64 + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sample { image: Tensor::from_parts(vec![c, s, s], data), label, marker }
}

/// Generates `n` samples deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    if n < spec.num_classes {
        return Err(Error::Contract(format!("need at least {} samples, got {n}", spec.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = labels(spec, n, &mut rng);
    Ok(labels.into_iter().map(|l| render(spec, l, &mut rng)).collect())
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.frsr")
}

/// Writes a dataset directory; returns the number of samples written.
pub fn gen_synthetic(spec: &SyntheticSpec, n: usize, out_dir: &Path) -> Result<usize> {
    let samples = generate(spec, n)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        write_tensors(&out_dir.join(&name), &[(IMAGE_TENSOR, &s.image)])?;
        csv.push_str(&format!("{name},{}\n", s.label));
    }
    let labels = out_dir.join(LABELS_FILE);
    fs::write(&labels, csv).map_err(|e| Error::io(&labels, e))?;
    Ok(samples.len())
}

/// Images and labels held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Per-sample shape, `C×H×W`.
    pub image_shape: Vec<usize>,
    pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub files: Vec<String>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let image_shape = first.image.shape().to_vec();
        let mut pixels = Vec::with_capacity(samples.len() * first.image.numel());
        for s in samples {
            if s.image.shape() != image_shape.as_slice() {
                return Err(Error::Contract(format!("mixed image shapes {:?} / {image_shape:?}", s.image.shape())));
            }
            pixels.extend_from_slice(s.image.data());
        }
        Ok(Dataset {
            image_shape,
            pixels,
            labels: samples.iter().map(|s| s.label).collect(),
            files: (0..samples.len()).map(sample_file_name).collect(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let labels_path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut files = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .rsplit_once(',')
                .and_then(|(f, l)| l.trim().parse::<usize>().ok().map(|l| (f.trim().to_string(), l)));
            let (file, label) = parsed.ok_or_else(|| {
                Error::Corruption(format!("{}:{}: expected `filename,label`", labels_path.display(), lineno + 1))
            })?;
            files.push(file);
            labels.push(label);
        }
        if files.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut image_shape: Option<Vec<usize>> = None;
        let mut pixels = Vec::new();
        for file in &files {
            let path: PathBuf = dir.join(file);
            let mut tensors = read_tensors(&path)?;
            let image = match tensors.len() {
                1 if tensors[0].0 == IMAGE_TENSOR => tensors.remove(0).1,
                _ => {
                    return Err(Error::Corruption(format!(
                        "{}: expected a single `{IMAGE_TENSOR}` tensor",
                        path.display()
                    )))
                }
            };
            match &image_shape {
                None => image_shape = Some(image.shape().to_vec()),
                Some(s) if s.as_slice() != image.shape() => {
                    return Err(Error::Corruption(format!(
                        "{}: image shape {:?} differs from {s:?}",
                        path.display(),
                        image.shape()
                    )))
                }
                Some(_) => {}
            }
            pixels.extend_from_slice(image.data());
        }
        Ok(Dataset { image_shape: image_shape.expect("non-empty"), pixels, labels, files })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape.iter().product();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into an `N×C×H×W` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image(0).len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        (Tensor::from_parts(shape, data), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Number of samples per label, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let classes = self.labels.iter().max().map_or(0, |&m| m + 1);
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
