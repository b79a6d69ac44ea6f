//! Datasets, augmentation and deterministic batching.
//!
//! Images are stored channel-major (`[C × H × W]`), first scaled to `[0, 1]`
//! and then standardized per channel with statistics of the training split.

mod cifar;
mod synth;

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cifar::{
    count_cifar_records, load_cifar10_binary, load_cifar10_with, parse_cifar_records, validate_cifar_file, CifarOptions, CifarRecord,
    CIFAR_IMAGE_BYTES, CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use synth::{synth_dataset, synth_dataset_cached, SynthConfig, SYNTH_CACHE_VERSION};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C × H × W]`, row-major within each channel.
    pub image: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over every pixel of `samples`.
    pub fn compute(samples: &[Sample], channels: usize) -> Self {
        let mut acc = StatsAccumulator::new(channels);
        for s in samples {
            acc.push(&s.image);
        }
        acc.finish()
    }

    /// `(x − mean) / std` per channel, in place.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / self.mean.len();
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }

    pub fn apply_all(&self, samples: &mut [Sample]) {
        for s in samples {
            self.apply(&mut s.image);
        }
    }
}

/// Streaming per-channel sums for [`NormStats`].
#[derive(Debug, Clone)]
pub(crate) struct StatsAccumulator {
    sum: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
}

impl StatsAccumulator {
    pub(crate) fn new(channels: usize) -> Self {
        StatsAccumulator {
            sum: vec![0.0; channels],
            sq: vec![0.0; channels],
            count: 0,
        }
    }

    pub(crate) fn push(&mut self, image: &[f32]) {
        let plane = image.len() / self.sum.len();
        for (c, chunk) in image.chunks(plane).enumerate() {
            for &v in chunk {
                self.sum[c] += v as f64;
                self.sq[c] += (v as f64) * (v as f64);
            }
        }
        self.count += plane;
    }

    pub(crate) fn finish(&self) -> NormStats {
        let n = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        NormStats { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub pad: usize,
    /// Output height and width; `None` keeps the input size.
    pub crop: Option<usize>,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            pad: 4,
            crop: None,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if let Some(c) = self.crop {
            if c == 0 || c > height + 2 * self.pad || c > width + 2 * self.pad {
                return Err(Error::Config(format!(
                    "crop {c} does not fit a {height}x{width} image padded by {}",
                    self.pad
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} must lie in [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

/// Zero-pads by `cfg.pad`, takes a random crop and flips horizontally with
/// probability `cfg.hflip_prob`. The label is unchanged.
pub fn augment(s: &Sample, channels: usize, height: usize, width: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    if !cfg.enabled {
        return s.clone();
    }
    let p = cfg.pad;
    let crop = cfg.crop.unwrap_or(height);
    let crop_w = cfg.crop.unwrap_or(width);
    let oy = rng.random_range(0..=height + 2 * p - crop);
    let ox = rng.random_range(0..=width + 2 * p - crop_w);
    let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob);
    let mut out = vec![0.0f32; channels * crop * crop_w];
    for c in 0..channels {
        for y in 0..crop {
            let sy = (oy + y) as isize - p as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..crop_w {
                let dx = if flip { crop_w - 1 - x } else { x };
                let sx = (ox + dx) as isize - p as isize;
                if sx < 0 || sx >= width as isize {
                    continue;
                }
                out[(c * crop + y) * crop_w + x] = s.image[(c * height + sy as usize) * width + sx as usize];
            }
        }
    }
    Sample {
        image: out,
        label: s.label,
    }
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N × C × H × W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples.
    pub indices: Vec<usize>,
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(epoch as u64);
    rng
}

const SHUFFLE_PURPOSE: u64 = 1;
const AUGMENT_PURPOSE: u64 = 2;

/// Sample order of one epoch, split into batches. The final batch may be
/// partial.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(shuffle_seed, epoch, SHUFFLE_PURPOSE));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stacks the given samples into a batch.
pub fn collect_batch<T: Scalar>(data: &Dataset, indices: &[usize]) -> Batch<T> {
    let dims = (data.height, data.width);
    collect_samples(data, indices, dims, |s| Cow::Borrowed(s))
}

fn collect_samples<'a, T: Scalar>(
    data: &'a Dataset,
    indices: &[usize],
    (h, w): (usize, usize),
    mut f: impl FnMut(&'a Sample) -> Cow<'a, Sample>,
) -> Batch<T> {
    let mut pixels = Vec::with_capacity(indices.len() * data.channels * h * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = f(&data.samples[i]);
        pixels.extend(s.image.iter().map(|&v| T::from_f64(v as f64)));
        labels.push(s.label);
    }
    Batch {
        images: Tensor::new([indices.len(), data.channels, h, w], pixels).expect("batch shape"),
        labels,
        indices: indices.to_vec(),
    }
}

/// Every batch of one epoch, optionally augmented. Order and augmentation
/// are functions of `(shuffle_seed, epoch)` only.
pub fn batches<T: Scalar>(
    data: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    augment_cfg: Option<&AugmentConfig>,
) -> Result<Vec<Batch<T>>> {
    let order = batch_order(data.len(), batch_size, shuffle_seed, epoch)?;
    let Some(cfg) = augment_cfg.filter(|c| c.enabled) else {
        return Ok(order.iter().map(|idx| collect_batch(data, idx)).collect());
    };
    cfg.validate(data.height, data.width)?;
    let dims = (cfg.crop.unwrap_or(data.height), cfg.crop.unwrap_or(data.width));
    let mut rng = epoch_rng(shuffle_seed, epoch, AUGMENT_PURPOSE);
    Ok(order
        .iter()
        .map(|idx| {
            collect_samples(data, idx, dims, |s| {
                Cow::Owned(augment(s, data.channels, data.height, data.width, cfg, &mut rng))
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset {
            channels: 1,
            height: 2,
            width: 3,
            num_classes: 2,
            samples: (0..n)
                .map(|i| Sample {
                    image: (0..6).map(|p| (i * 6 + p) as f32).collect(),
                    label: i % 2,
                })
                .collect(),
        }
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let d = toy(100);
        let b: Vec<Batch<f32>> = batches(&d, 64, 3, 0, None).unwrap();
        assert_eq!(b.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![64, 36]);
        assert_eq!(b[0].images.shape(), &[64, 1, 2, 3]);
        let again = batch_order(100, 64, 3, 0).unwrap();
        assert_eq!(again, b.iter().map(|b| b.indices.clone()).collect::<Vec<_>>());
        assert_ne!(batch_order(100, 64, 3, 1).unwrap(), again);
        let mut all: Vec<usize> = again.concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(batch_order(10, 0, 0, 0).is_err());
    }

    #[test]
    fn augment_degenerate_cases() {
        let d = toy(1);
        let s = &d.samples[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&augment(s, 1, 2, 3, &AugmentConfig::disabled(), &mut rng), s);
        let plain = AugmentConfig {
            enabled: true,
            pad: 0,
            crop: None,
            hflip_prob: 0.0,
        };
        assert_eq!(&augment(s, 1, 2, 3, &plain, &mut rng), s);
        let flip = AugmentConfig { hflip_prob: 1.0, ..plain };
        let once = augment(s, 1, 2, 3, &flip, &mut rng);
        assert_eq!(once.image, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(&augment(&once, 1, 2, 3, &flip, &mut rng), s);
    }

    #[test]
    fn augment_keeps_shape_and_label() {
        let d = toy(4);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in &d.samples {
            let a = augment(s, 1, 2, 3, &cfg, &mut rng);
            assert_eq!(a.image.len(), 6);
            assert_eq!(a.label, s.label);
        }
        assert!(AugmentConfig { crop: Some(20), ..cfg }.validate(2, 3).is_err());
    }

    #[test]
    fn norm_stats_standardize() {
        let d = toy(3);
        let stats = NormStats::compute(&d.samples, 1);
        let mut samples = d.samples.clone();
        stats.apply_all(&mut samples);
        let all: Vec<f64> = samples.iter().flat_map(|s| s.image.iter().map(|&v| v as f64)).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
    }
}
