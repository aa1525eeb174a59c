//! Checkpoint persistence: a plain-text manifest plus one raw tensor blob.
//!
//! The blob is little-endian IEEE-754 single precision, row-major, with
//! tensors packed back to back in manifest order. Nothing in the directory
//! depends on wall-clock time, so identical runs produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, Mode, TrainingConfig};
use crate::nn::{ParamId, ParamStore};
use crate::watermark::Watermark;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count; `shape` must multiply out to exactly this.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub mode: Mode,
    pub config_hash: String,
    pub iteration: u64,
    /// Set on minted instances only; adapter and base checkpoints carry none.
    pub watermark: Option<String>,
    /// Blob hash of the pretrained base this checkpoint descends from.
    pub pretrained_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    /// Structural validity: known dtype, unique names, shapes matching
    /// element counts, and a gap-free consecutive blob layout.
    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.tensors.is_empty() {
            return Err(Error::Checkpoint("manifest lists no tensors".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut expected_offset = 0u64;
        for t in &self.tensors {
            if t.name.is_empty() {
                return Err(Error::Checkpoint("tensor with an empty name".into()));
            }
            if !seen.insert(&t.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {:?}", t.name)));
            }
            let mut product = 1u64;
            for &d in &t.shape {
                product = product
                    .checked_mul(d as u64)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: shape overflows", t.name)))?;
            }
            if product != t.len {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} holds {product} elements, manifest says {}",
                    t.name, t.shape, t.len
                )));
            }
            if t.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "{}: offset {} leaves the packed layout (expected {expected_offset})",
                    t.name, t.offset
                )));
            }
            expected_offset = t
                .len
                .checked_mul(4)
                .and_then(|b| expected_offset.checked_add(b))
                .ok_or_else(|| Error::Checkpoint(format!("{}: blob size overflows", t.name)))?;
        }
        if let Some(w) = &self.watermark {
            Watermark::parse(w)?;
        }
        Ok(())
    }

    /// Total blob size in bytes implied by the layout.
    pub fn blob_len(&self) -> u64 {
        self.tensors.last().map(|t| t.offset + t.len * 4).unwrap_or(0)
    }
}

/// Parse and validate manifest text.
pub fn parse_manifest(text: &str) -> Result<CheckpointManifest> {
    let m: CheckpointManifest =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    m.validate()?;
    Ok(m)
}

/// Checkpoint-level metadata supplied by the writer.
pub struct CheckpointMeta {
    pub mode: Mode,
    pub iteration: u64,
    pub watermark: Option<Watermark>,
    pub pretrained_hash: Option<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::Checkpoint("path has no parent".into()))?;
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Checkpoint("path has no file name".into()))?;
    let tmp = dir.join(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write the named parameters as a checkpoint directory.
///
/// Tensors are serialized in name order so the layout is independent of
/// store insertion order. Each file lands via write-temp-then-rename.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    ids: &[ParamId],
    cfg: &TrainingConfig,
    meta: &CheckpointMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ordered: Vec<ParamId> = ids.to_vec();
    ordered.sort_by(|a, b| store.meta(*a).name.cmp(&store.meta(*b).name));

    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(ordered.len());
    for id in ordered {
        let value = store.get(id);
        let offset = blob.len() as u64;
        for &v in value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: store.meta(id).name.clone(),
            shape: value.shape().to_vec(),
            offset,
            len: value.len() as u64,
        });
    }

    let manifest = CheckpointManifest {
        dtype: "f32le".into(),
        mode: meta.mode,
        config_hash: cfg.hash(),
        iteration: meta.iteration,
        watermark: meta.watermark.as_ref().map(|w| w.to_string()),
        pretrained_hash: meta.pretrained_hash.clone(),
        tensors,
    };
    manifest.validate()?;

    write_atomic(&dir.join(TENSORS_FILE), &blob)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialize: {e}")))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub config: TrainingConfig,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
    /// Hash of the raw blob, the checkpoint's identity.
    pub blob_hash: String,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let manifest = parse_manifest(&manifest_text)?;
    let config = super::config::load_config(&dir.join(CONFIG_FILE))?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: stored config does not match the manifest's config hash",
            dir.display()
        )));
    }

    let blob = std::fs::read(dir.join(TENSORS_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    if blob.len() as u64 != manifest.blob_len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes but the manifest lays out {}",
            blob.len(),
            manifest.blob_len()
        )));
    }

    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let start = t.offset as usize;
        let end = start + t.len as usize * 4;
        let mut values = Vec::with_capacity(t.len as usize);
        for chunk in blob[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("{}: non-finite value in blob", t.name)));
            }
            values.push(v);
        }
        let array = ArrayD::from_shape_vec(t.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
        tensors.insert(t.name.clone(), array);
    }

    let mut h = Sha256::new();
    h.update(&blob);
    Ok(LoadedCheckpoint { manifest, config, tensors, blob_hash: hex(&h.finalize()) })
}

/// Copy checkpoint tensors into an already-built store by name.
///
/// Every checkpoint tensor must land on a store parameter of the same shape;
/// store parameters absent from the checkpoint are left at initialization.
pub fn apply_tensors(store: &mut ParamStore, tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<usize> {
    for (name, value) in tensors {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint tensor {name:?} has no parameter site")))?;
        let target = store.get_mut(id);
        if target.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name:?}: checkpoint shape {:?} vs parameter shape {:?}",
                value.shape(),
                target.shape()
            )));
        }
        target.assign(value);
    }
    Ok(tensors.len())
}

/// Hash of a checkpoint's tensor blob without decoding it.
pub fn blob_hash(dir: &Path) -> Result<String> {
    let blob = std::fs::read(dir.join(TENSORS_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let mut h = Sha256::new();
    h.update(&blob);
    Ok(hex(&h.finalize()))
}
