//! `manifest.json` plus `params.bin` (little-endian f32, row-major,
//! concatenated in manifest order).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Scalar};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const DTYPE: &str = "f32";
const F32_BYTES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub config: RunConfig,
    /// Generator positions by consumer name.
    pub rng: BTreeMap<String, RngState>,
    pub params: Vec<ParamRecord>,
}

/// A restored run state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub step: usize,
    pub rng: BTreeMap<String, RngState>,
    pub model: Model<T>,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &RunConfig,
    model: &Model<T>,
    step: usize,
    rng: &BTreeMap<String, RngState>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    for (name, t) in model.tensors() {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
        params.push(ParamRecord {
            name,
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        rng: rng.clone(),
        params,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    std::fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

/// Checks that records tile `[0, total)` in order and match their shapes.
/// Returns the total byte count.
fn check_tiling(params: &[ParamRecord]) -> Result<usize> {
    let mut end = 0usize;
    for r in params {
        if r.dtype != DTYPE {
            return Err(Error::CheckpointConsistency(format!(
                "{}: dtype {:?} (expected {DTYPE})",
                r.name, r.dtype
            )));
        }
        if r.offset != end {
            return Err(Error::CheckpointConsistency(format!(
                "{}: offset {} leaves a gap or overlap (expected {end})",
                r.name, r.offset
            )));
        }
        let numel: usize = r.shape.iter().product();
        if r.len != numel * F32_BYTES {
            return Err(Error::CheckpointConsistency(format!(
                "{}: byte length {} does not match shape {:?}",
                r.name, r.len, r.shape
            )));
        }
        end += r.len;
    }
    Ok(end)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::CheckpointVersion {
                found: other.map_or(0, |v| v.min(u32::MAX as u64) as u32),
                expected: FORMAT_VERSION,
            })
        }
    }
    Ok(serde_json::from_value(raw)?)
}

/// Loads into `T`; loading as f64 widens every stored f32 exactly.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    let total = check_tiling(&manifest.params)?;
    let blob = std::fs::read(dir.join(PARAMS_FILE))?;
    if blob.len() < total {
        return Err(Error::CheckpointTruncated {
            expected: total,
            found: blob.len(),
        });
    }
    if blob.len() > total {
        return Err(Error::CheckpointConsistency(format!(
            "{} trailing bytes after the last tensor",
            blob.len() - total
        )));
    }
    let mut model = Model::<T>::build(&manifest.config)?;
    {
        let mut slots = model.tensors_mut();
        if slots.len() != manifest.params.len() {
            return Err(Error::CheckpointConsistency(format!(
                "manifest lists {} tensors, the configured model has {}",
                manifest.params.len(),
                slots.len()
            )));
        }
        for ((name, t), r) in slots.iter_mut().zip(&manifest.params) {
            if *name != r.name || t.shape() != r.shape.as_slice() {
                return Err(Error::CheckpointConsistency(format!(
                    "manifest entry {} {:?} does not match model tensor {} {:?}",
                    r.name,
                    r.shape,
                    name,
                    t.shape()
                )));
            }
            let bytes = &blob[r.offset..r.offset + r.len];
            for (dst, c) in t.data_mut().iter_mut().zip(bytes.chunks_exact(F32_BYTES)) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                *dst = T::cast(v as f64);
            }
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        rng: manifest.rng,
        model,
    })
}

/// Accepts a checkpoint directory or a run directory holding `final/`.
pub fn resolve_checkpoint_dir(path: &Path) -> std::path::PathBuf {
    if path.join(MANIFEST_FILE).exists() {
        path.to_path_buf()
    } else {
        path.join("final")
    }
}
