//! Procedural texture classification.
//!
//! Class `c` of `K` is a sinusoidal grating at orientation `π·c/K` with a
//! class-dependent spatial frequency. Each sample draws its own phase,
//! per-channel contrast, small orientation jitter and additive Gaussian
//! noise. Horizontal flips map one orientation class onto another, so
//! these datasets should be trained without flip augmentation.
//!
//! Cache files (`synth-v1-<params>.bin`) are laid out as: magic
//! `RTKSYNTH`, `u32` version, `u32` header length, a JSON header holding the
//! generator parameters, then every training and test record as a `u32`
//! label followed by `C·H·W` `f32` pixels in `[0, 1]`, all little-endian.
//! Normalization is applied after loading.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, NormStats, Sample};
use crate::error::{Error, Result};

pub const SYNTH_CACHE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RTKSYNTH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Standard deviation of the orientation jitter, in radians.
    pub jitter: f64,
}

impl SynthConfig {
    /// 10 classes, 2,000 / 1,000 samples of 3×16×16.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            num_classes: 10,
            n_train: 2000,
            n_test: 1000,
            size: 16,
            channels: 3,
            seed,
            noise: 0.8,
            jitter: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.size == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic images need positive size and channels".into()));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }

    fn cache_name(&self) -> String {
        format!(
            "synth-v{SYNTH_CACHE_VERSION}-k{}-n{}-m{}-s{}-c{}-seed{}-noise{}-jitter{}.bin",
            self.num_classes, self.n_train, self.n_test, self.size, self.channels, self.seed, self.noise, self.jitter
        )
    }

    pub fn cache_path(&self, dir: &Path) -> PathBuf {
        dir.join(self.cache_name())
    }
}

fn render(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("std");
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("std");
    let theta = PI * label as f64 / cfg.num_classes as f64 + jitter.sample(rng);
    let freq = 2.0 + (label % 3) as f64 * 0.75;
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let n = cfg.size;
    let mut image = Vec::with_capacity(cfg.channels * n * n);
    for _ in 0..cfg.channels {
        let contrast = rng.random_range(0.25..0.45);
        for y in 0..n {
            for x in 0..n {
                let u = (x as f64 * ct + y as f64 * st) / n as f64;
                let v = 0.5 + contrast * (2.0 * PI * freq * u + phase).sin();
                let v = if cfg.noise > 0.0 { v + noise.sample(rng) } else { v };
                image.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sample { image, label }
}

fn split(cfg: &SynthConfig, count: usize, stream: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..count).map(|i| render(cfg, i % cfg.num_classes, &mut rng)).collect()
}

fn raw(cfg: &SynthConfig) -> (Vec<Sample>, Vec<Sample>) {
    (split(cfg, cfg.n_train, 0), split(cfg, cfg.n_test, 1))
}

fn finish(cfg: &SynthConfig, mut train: Vec<Sample>, mut test: Vec<Sample>) -> (Dataset, Dataset) {
    let stats = NormStats::compute(&train, cfg.channels);
    stats.apply_all(&mut train);
    stats.apply_all(&mut test);
    let wrap = |samples| Dataset {
        channels: cfg.channels,
        height: cfg.size,
        width: cfg.size,
        num_classes: cfg.num_classes,
        samples,
    };
    (wrap(train), wrap(test))
}

/// Generates, standardizes and returns `(train, test)`. Class `i % K` is
/// assigned to the `i`-th sample, so splits are balanced.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let (train, test) = raw(cfg);
    Ok(finish(cfg, train, test))
}

fn encode(cfg: &SynthConfig, train: &[Sample], test: &[Sample]) -> Vec<u8> {
    let header = serde_json::to_vec(cfg).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SYNTH_CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for s in train.iter().chain(test) {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(cfg: &SynthConfig, bytes: &[u8], origin: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let fail = |m: &str| Error::format(origin, m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a synthetic dataset cache"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != SYNTH_CACHE_VERSION {
        return Err(fail("unsupported cache version"));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header = bytes.get(16..16 + len).ok_or_else(|| fail("truncated header"))?;
    let stored: SynthConfig = serde_json::from_slice(header).map_err(|e| fail(&e.to_string()))?;
    if &stored != cfg {
        return Err(fail("cache was written for different generator parameters"));
    }
    let pixels = cfg.channels * cfg.size * cfg.size;
    let record = 4 + 4 * pixels;
    let body = &bytes[16 + len..];
    if body.len() != record * (cfg.n_train + cfg.n_test) {
        return Err(fail("record payload has the wrong size"));
    }
    let mut samples: Vec<Sample> = body
        .chunks_exact(record)
        .map(|r| Sample {
            label: u32::from_le_bytes(r[..4].try_into().expect("4 bytes")) as usize,
            image: r[4..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        })
        .collect();
    let test = samples.split_off(cfg.n_train);
    Ok((samples, test))
}

/// [`synth_dataset`] backed by a cache file in `dir`. An unreadable or
/// mismatched cache is regenerated.
pub fn synth_dataset_cached(cfg: &SynthConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let path = cfg.cache_path(dir);
    if let Ok(bytes) = std::fs::read(&path) {
        match decode(cfg, &bytes, &path) {
            Ok((train, test)) => return Ok(finish(cfg, train, test)),
            Err(e) => log::warn!("ignoring synthetic cache: {e}"),
        }
    }
    let (train, test) = raw(cfg);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&path, encode(cfg, &train, &test)).map_err(|e| Error::io(&path, e))?;
    Ok(finish(cfg, train, test))
}
