//! Checkpoint files.
//!
//! Layout: the 8-byte magic `TSEGCKPT`, a little-endian `u32` format
//! version, a `u64` header length, the JSON [`CheckpointHeader`], then every
//! parameter as little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    pub val_dice: f64,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the weight blob.
    pub blob_sha256: String,
}

/// Stable hash of a model configuration, used to tie records to checkpoints.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, step: u64, epoch: usize, val_dice: f64, path: &Path) -> Result<()> {
    let mut blob = Vec::with_capacity(model.count_parameters() * 4);
    let mut tensors = Vec::new();
    for e in model.params().entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
        });
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        step,
        epoch,
        val_dice,
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut bytes = Vec::with_capacity(20 + json.len() + blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    atomic_write(path, &bytes)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; 20];
    f.read_exact(&mut prefix).map_err(|e| Error::io(path, e))?;
    let len = parse_prefix(&prefix, path)?;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&json).map_err(|e| Error::format("checkpoint", path, e))
}

fn parse_prefix(prefix: &[u8], path: &Path) -> Result<usize> {
    if prefix.len() < 20 || &prefix[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", path, "bad magic"));
    }
    let version = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            path,
            format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    Ok(u64::from_le_bytes(prefix[12..20].try_into().unwrap()) as usize)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = parse_prefix(&bytes, path)?;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::format("checkpoint", path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::format("checkpoint", path, e))?;
    let blob = &bytes[20 + len..];
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(Error::format("checkpoint", path, "weight blob checksum mismatch"));
    }
    let mut model = Model::<T>::new(&header.model)?;
    let entries = model.params_mut().entries_mut();
    if entries.len() != header.tensors.len() {
        return Err(Error::format(
            "checkpoint",
            path,
            format!("{} tensors stored, model has {}", header.tensors.len(), entries.len()),
        ));
    }
    let mut offset = 0;
    for (e, t) in entries.iter_mut().zip(&header.tensors) {
        if e.name != t.name || e.value.shape() != t.shape.as_slice() {
            return Err(Error::format(
                "checkpoint",
                path,
                format!("tensor {} {:?} does not match model tensor {} {:?}", t.name, t.shape, e.name, e.value.shape()),
            ));
        }
        let n = e.value.numel();
        let chunk = blob
            .get(offset * 4..(offset + n) * 4)
            .ok_or_else(|| Error::format("checkpoint", path, "truncated weights"))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        e.value = Tensor::from_vec(t.shape.clone(), data);
        offset += n;
    }
    if offset * 4 != blob.len() {
        return Err(Error::format("checkpoint", path, "trailing bytes after weights"));
    }
    Ok((model, header))
}
