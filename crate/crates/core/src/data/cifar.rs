//! CIFAR-10 binary batches.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 1024
//! red values, then green, then blue, each plane row-major over 32×32.
//! Training data lives in `data_batch_1.bin` … `data_batch_5.bin`, test data
//! in `test_batch.bin`, 10,000 records per file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, NormStats, Sample, StatsAccumulator};
use crate::error::{Error, Result};

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_IMAGE_BYTES;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
const NUM_CLASSES: usize = 10;
const NORM_CACHE_FILE: &str = "rtk_norm_stats.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// 3072 bytes, channel-major.
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Pixels scaled to `[0, 1]`, not yet standardized.
    pub fn to_sample(&self) -> Sample {
        Sample {
            image: self.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
            label: self.label as usize,
        }
    }
}

pub fn parse_cifar_records(bytes: &[u8], origin: &Path) -> Result<Vec<CifarRecord>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            origin,
            format!(
                "size {} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, r)| {
            if r[0] as usize >= NUM_CLASSES {
                return Err(Error::format(origin, format!("record {i} has label {}", r[0])));
            }
            Ok(CifarRecord {
                label: r[0],
                pixels: r[1..].to_vec(),
            })
        })
        .collect()
}

/// Checks that `path` holds exactly `records` records.
pub fn validate_cifar_file(path: &Path, records: usize) -> Result<()> {
    let actual = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    let expected = (records * CIFAR_RECORD_BYTES) as u64;
    if actual != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes ({records} records), found {actual} bytes"),
        ));
    }
    Ok(())
}

/// Validates every file of the standard layout and returns the
/// `(train, test)` record counts without reading pixel data.
pub fn count_cifar_records(dir: &Path, records_per_file: usize) -> Result<(usize, usize)> {
    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        validate_cifar_file(&dir.join(name), records_per_file)?;
    }
    Ok((CIFAR_TRAIN_FILES.len() * records_per_file, records_per_file))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CifarOptions {
    pub records_per_file: usize,
    /// Keep only the first `n` training samples (normalization statistics
    /// still use the full split).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Persist normalization statistics beside the data.
    pub cache_stats: bool,
}

impl Default for CifarOptions {
    fn default() -> Self {
        CifarOptions {
            records_per_file: CIFAR_RECORDS_PER_FILE,
            train_limit: None,
            test_limit: None,
            cache_stats: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CachedStats {
    train_records: usize,
    stats: NormStats,
}

/// Standard layout: 50,000 training and 10,000 test samples.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, &CifarOptions::default())
}

pub fn load_cifar10_with(dir: &Path, opts: &CifarOptions) -> Result<(Dataset, Dataset)> {
    let train_paths: Vec<_> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let test_path = dir.join(CIFAR_TEST_FILE);
    let (train_records, _) = count_cifar_records(dir, opts.records_per_file)?;
    let cache_path = dir.join(NORM_CACHE_FILE);
    let cached = std::fs::read_to_string(&cache_path)
        .ok()
        .and_then(|t| serde_json::from_str::<CachedStats>(&t).ok())
        .filter(|c| c.train_records == train_records && c.stats.mean.len() == 3);

    let train_limit = opts.train_limit.unwrap_or(usize::MAX);
    let mut acc = StatsAccumulator::new(3);
    let mut train = Vec::new();
    for p in &train_paths {
        if cached.is_some() && train.len() >= train_limit {
            break;
        }
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        for r in parse_cifar_records(&bytes, p)? {
            let s = r.to_sample();
            if cached.is_none() {
                acc.push(&s.image);
            }
            if train.len() < train_limit {
                train.push(s);
            }
        }
    }
    let stats = match cached {
        Some(c) => c.stats,
        None => {
            let stats = acc.finish();
            if opts.cache_stats {
                let record = CachedStats {
                    train_records,
                    stats: stats.clone(),
                };
                let text = serde_json::to_string_pretty(&record).expect("stats serialize");
                if let Err(e) = std::fs::write(&cache_path, text) {
                    log::warn!("could not cache normalization statistics at {}: {e}", cache_path.display());
                }
            }
            stats
        }
    };
    let bytes = std::fs::read(&test_path).map_err(|e| Error::io(&test_path, e))?;
    let mut test: Vec<Sample> = parse_cifar_records(&bytes, &test_path)?
        .iter()
        .take(opts.test_limit.unwrap_or(usize::MAX))
        .map(CifarRecord::to_sample)
        .collect();
    stats.apply_all(&mut train);
    stats.apply_all(&mut test);
    let wrap = |samples| Dataset {
        channels: 3,
        height: 32,
        width: 32,
        num_classes: NUM_CLASSES,
        samples,
    };
    Ok((wrap(train), wrap(test)))
}
