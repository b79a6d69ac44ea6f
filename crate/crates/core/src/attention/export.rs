//! Per-epoch attention files.
//!
//! `attn_epoch_EEE.csv` holds `A` without a header: one row per student
//! feature, one column per teacher feature. `attn_epoch_EEE.json` holds
//! everything else needed to interpret it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RTKConfig, RTKSelection};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub epoch: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub k: usize,
    pub tau: f64,
    pub renormalize: bool,
    pub retained: Vec<usize>,
    pub impact: Vec<f64>,
    /// `z`, `[n_t][n_s]`.
    pub logits: Vec<Vec<f64>>,
    /// `A`, `[n_s][n_t]`; stored in the CSV file.
    #[serde(skip)]
    pub matrix: Vec<Vec<f64>>,
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

impl AttentionExport {
    pub fn new<T: Scalar>(epoch: usize, logits: &Tensor<T>, a: &Tensor<T>, sel: &RTKSelection<T>, cfg: &RTKConfig) -> Self {
        AttentionExport {
            epoch,
            n_s: a.shape()[0],
            n_t: a.shape()[1],
            k: cfg.k,
            tau: cfg.tau,
            renormalize: cfg.renormalize,
            retained: sel.retained.clone(),
            impact: sel.impact.iter().map(|v| v.as_f64()).collect(),
            logits: rows(logits),
            matrix: rows(a),
        }
    }

    pub fn csv_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("attn_epoch_{epoch:03}.csv"))
    }

    pub fn json_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("attn_epoch_{epoch:03}.json"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = Self::csv_path(dir, self.epoch);
        let csv_err = |e: csv::Error| Error::format(&csv_path, e.to_string());
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&csv_path)
            .map_err(csv_err)?;
        for row in &self.matrix {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = Self::json_path(dir, self.epoch);
        let json = serde_json::to_string_pretty(self).expect("export serializes");
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(dir: &Path, epoch: usize) -> Result<Self> {
        let json_path = Self::json_path(dir, epoch);
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let mut out: AttentionExport =
            serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
        let csv_path = Self::csv_path(dir, epoch);
        let csv_err = |e: csv::Error| Error::format(&csv_path, e.to_string());
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&csv_path)
            .map_err(csv_err)?;
        out.matrix = r
            .deserialize::<Vec<f64>>()
            .collect::<std::result::Result<_, _>>()
            .map_err(csv_err)?;
        if out.matrix.len() != out.n_s || out.matrix.iter().any(|r| r.len() != out.n_t) {
            return Err(Error::format(
                &csv_path,
                format!("expected {} rows of {} values", out.n_s, out.n_t),
            ));
        }
        Ok(out)
    }
}
