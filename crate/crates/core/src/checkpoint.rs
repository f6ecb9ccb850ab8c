//! Single-file checkpoint container.
//!
//! ```text
//! magic    8 bytes   "TEXSRCKP"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes, UTF-8 JSON (config, step, parameter manifest)
//! data     little-endian f32 arrays at the manifest offsets
//! digest   32 bytes  SHA-256 of everything before it
//! ```
//!
//! Offsets in the manifest are relative to the start of `data`. Loading
//! validates the manifest against the layout implied by the stored config
//! before verifying the digest, so a consistently edited shape is reported
//! by parameter name.

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Result};
use crate::model::{IsteModel, ModelConfig};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"TEXSRCKP";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<ManifestEntry>,
    /// Reserved for optimizer moments; always absent in files written here.
    #[serde(default)]
    pub optimizer: Option<serde_json::Value>,
}

/// Everything a checkpoint stores besides the weights themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
}

pub fn to_bytes(model: &IsteModel, step: u64) -> Result<Vec<u8>> {
    let arrays = model.params().to_f32()?;
    let mut params = Vec::with_capacity(arrays.len());
    let mut data = Vec::new();
    for (name, (shape, values)) in &arrays {
        params.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset: data.len() as u64,
        });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        step,
        params,
        optimizer: None,
    };
    let header =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;

    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + data.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save(model: &IsteModel, step: u64, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model, step)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Splits a checkpoint into its header without validating data or digest.
pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, usize), CheckpointError> {
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes is shorter than the prefix",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen)
        .ok()
        .filter(|&h| h <= bytes.len() - PREFIX_LEN)
        .ok_or_else(|| CheckpointError::Truncated(format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + hlen])
        .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    Ok((header, PREFIX_LEN + hlen))
}

pub fn from_bytes(
    bytes: &[u8],
    device: &Device,
    dtype: DType,
) -> Result<(IsteModel, CheckpointMeta)> {
    let (header, data_start) = read_header(bytes)?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::CorruptManifest(format!("config: {e}")))?;
    let layout = IsteModel::layout(&header.config)?;

    let mut expected_offset = 0u64;
    for entry in &header.params {
        let Some(dims) = layout.get(&entry.name) else {
            return Err(CheckpointError::CorruptManifest(format!(
                "unexpected parameter `{}`",
                entry.name
            ))
            .into());
        };
        if &entry.shape != dims {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                expected: dims.clone(),
                found: entry.shape.clone(),
            }
            .into());
        }
        if entry.dtype != "f32" {
            return Err(CheckpointError::CorruptManifest(format!(
                "`{}` has dtype {}",
                entry.name, entry.dtype
            ))
            .into());
        }
        if entry.offset != expected_offset {
            return Err(CheckpointError::CorruptManifest(format!(
                "`{}` at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            ))
            .into());
        }
        expected_offset += 4 * dims.iter().product::<usize>() as u64;
    }
    if header.params.len() != layout.len() {
        return Err(CheckpointError::CorruptManifest(format!(
            "{} parameter arrays listed, config implies {}",
            header.params.len(),
            layout.len()
        ))
        .into());
    }
    let data_len = expected_offset as usize;
    let total = data_start + data_len + DIGEST_LEN;
    if bytes.len() < total {
        return Err(CheckpointError::Truncated(format!(
            "expected {total} bytes, found {}",
            bytes.len()
        ))
        .into());
    }
    if bytes.len() > total {
        return Err(CheckpointError::CorruptManifest(format!(
            "{} trailing bytes",
            bytes.len() - total
        ))
        .into());
    }
    let digest = Sha256::digest(&bytes[..total - DIGEST_LEN]);
    if digest.as_slice() != &bytes[total - DIGEST_LEN..] {
        return Err(CheckpointError::Checksum.into());
    }

    let data = &bytes[data_start..data_start + data_len];
    let mut store = ParamStore::new(device.clone(), dtype);
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let values = data[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        store.insert(entry.name.clone(), &entry.shape, values)?;
    }
    let model = IsteModel::from_params(header.config.clone(), store)?;
    Ok((
        model,
        CheckpointMeta {
            config: header.config,
            step: header.step,
        },
    ))
}

pub fn load(
    path: impl AsRef<Path>,
    device: &Device,
    dtype: DType,
) -> Result<(IsteModel, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?, device, dtype)
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
