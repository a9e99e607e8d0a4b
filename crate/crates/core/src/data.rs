//! Labeled image sets and the synthetic blob generator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::random::{gaussian_vec, seeded};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `N × C × H × W`.
    images: DenseTensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: DenseTensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::invalid(format!(
                "images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
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

    pub fn images(&self) -> &DenseTensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (DenseTensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (DenseTensor::from_parts(vec![indices.len(), c, h, w], data), labels)
    }
}

/// Options for [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Image side length.
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            per_class: 200,
            size: 24,
            seed: 0,
            noise: 1.0,
        }
    }
}

/// One-channel images, each holding a bright Gaussian blob. Class `k` puts
/// its blob at angle `2πk/K` on a circle around the image centre; every
/// sample jitters the position by up to a pixel and the amplitude by ±20%,
/// then adds pixel noise. Sample `i` has label `i mod K`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    let k = cfg.num_classes;
    if k < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if cfg.per_class == 0 || cfg.size < 4 {
        return Err(Error::invalid("need per_class ≥ 1 and size ≥ 4"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::invalid("noise must be a finite non-negative number"));
    }
    let n = k * cfg.per_class;
    let size = cfg.size;
    let centre = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 4.0;
    let sigma = size as f64 / 12.0;
    let mut rng = seeded(cfg.seed, 0);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let angle = std::f64::consts::TAU * label as f64 / k as f64;
        let cy = centre + radius * angle.sin() + rng.random_range(-1.0..=1.0);
        let cx = centre + radius * angle.cos() + rng.random_range(-1.0..=1.0);
        let amp = rng.random_range(0.8..=1.2);
        let noise = gaussian_vec(&mut rng, size * size, cfg.noise);
        for y in 0..size {
            for x in 0..size {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data.push(amp * (-r2 / (2.0 * sigma * sigma)).exp() + noise[y * size + x]);
            }
        }
        labels.push(label);
    }
    let images = DenseTensor::from_vec(&[n, 1, size, size], data)?;
    LabeledDataset::new(images, labels, k)
}
