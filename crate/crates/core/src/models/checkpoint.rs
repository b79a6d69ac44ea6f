//! Versioned binary container for named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 8    | magic `RTKCKPT\0`                         |
//! | 8           | 4    | format version (`u32`, currently 1)       |
//! | 12          | 8    | manifest length `L` in bytes (`u64`)      |
//! | 20          | L    | UTF-8 JSON manifest                       |
//! | 20 + L      | 4·n  | payload: `f32` values of every array      |
//!
//! The manifest is `{"kind", "config", "arrays": [{"name", "shape",
//! "offset", "len"}]}` where `offset` and `len` count `f32` elements from
//! the start of the payload. Arrays are stored back to back in manifest
//! order, so writing the same weights always yields the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RTKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the arrays describe, e.g. `backbone` or `attention`.
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: serde_json::Value,
    arrays: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ManifestEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                    len: a.data.len(),
                };
                offset += a.data.len();
                e
            })
            .collect();
        let manifest = Manifest {
            kind: self.kind.clone(),
            config: self.config.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER + json.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(origin, m);
        if bytes.len() < HEADER || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(format!("manifest length {len} exceeds file size {}", bytes.len())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..payload_start])
            .map_err(|e| fail(format!("bad manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let total: usize = manifest.arrays.iter().map(|a| a.len).sum();
        if payload.len() != 4 * total {
            return Err(fail(format!(
                "payload holds {} bytes, manifest describes {} bytes",
                payload.len(),
                4 * total
            )));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > total {
                return Err(fail(format!("array `{}` has inconsistent extent", e.name)));
            }
            let data = payload[4 * e.offset..4 * (e.offset + e.len)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push(ArrayEntry {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            config: manifest.config,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn entry<T: Scalar>(name: impl Into<String>, shape: &[usize], data: &[T]) -> ArrayEntry {
    ArrayEntry {
        name: name.into(),
        shape: shape.to_vec(),
        data: data.iter().map(|v| v.as_f64() as f32).collect(),
    }
}

pub(crate) fn take_array<T: Scalar>(ckpt: &Checkpoint, name: &str, shape: &[usize], origin: &Path) -> Result<Vec<T>> {
    let a = ckpt
        .array(name)
        .ok_or_else(|| Error::format(origin, format!("missing array `{name}`")))?;
    if a.shape != shape {
        return Err(Error::format(
            origin,
            format!("array `{name}` has shape {:?}, expected {shape:?}", a.shape),
        ));
    }
    Ok(a.data.iter().map(|&v| T::from_f64(v as f64)).collect())
}

const BACKBONE_KIND: &str = "backbone";

impl<T: Scalar> Model<T> {
    /// Parameters followed by batch-norm running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays: Vec<ArrayEntry> = self
            .params()
            .iter()
            .map(|(_, p)| entry(p.name.clone(), p.value.shape(), p.value.data()))
            .collect();
        for r in self.running_stats() {
            arrays.push(entry(format!("{}.running_mean", r.name), &[r.mean.len()], &r.mean));
            arrays.push(entry(format!("{}.running_var", r.name), &[r.var.len()], &r.var));
        }
        Checkpoint {
            kind: BACKBONE_KIND.into(),
            config: serde_json::to_value(self.config()).expect("config serializes"),
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        if ckpt.kind != BACKBONE_KIND {
            return Err(Error::format(
                origin,
                format!("expected a backbone checkpoint, found `{}`", ckpt.kind),
            ));
        }
        let cfg: BackboneConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::format(origin, format!("bad backbone config: {e}")))?;
        let mut model = Model::build(&cfg, 0)?;
        let expected = model.params().len() + 2 * model.running_stats().len();
        if ckpt.arrays.len() != expected {
            return Err(Error::format(
                origin,
                format!("checkpoint has {} arrays, model needs {expected}", ckpt.arrays.len()),
            ));
        }
        for p in model.params_mut().iter_mut() {
            let data = take_array(ckpt, &p.name, p.value.shape(), origin)?;
            p.value = std::sync::Arc::new(Tensor::new(p.value.shape().to_vec(), data)?);
        }
        for r in model.running_stats_mut() {
            r.mean = take_array(ckpt, &format!("{}.running_mean", r.name), &[r.mean.len()], origin)?;
            r.var = take_array(ckpt, &format!("{}.running_var", r.name), &[r.var.len()], origin)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_exact() {
        let cfg = BackboneConfig::student4(3, 16, 10);
        let model = Model::<f32>::build(&cfg, 11).unwrap();
        let bytes = model.to_checkpoint().to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let restored = Model::<f32>::from_checkpoint(&back, Path::new("mem")).unwrap();
        assert_eq!(restored.config(), model.config());
        assert_eq!(restored.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = Model::<f32>::build(&BackboneConfig::student4(3, 16, 10), 0).unwrap();
        let mut bytes = model.to_checkpoint().to_bytes();
        let origin = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], origin).is_err());
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes, origin).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        assert!(Checkpoint::from_bytes(b"nonsense", origin).is_err());
    }
}
