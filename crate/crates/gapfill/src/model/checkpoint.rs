//! Weight checkpoint file: an 8-byte magic, a length-prefixed JSON header
//! (config echo, format version, parameter names and shapes) followed by the
//! parameter blobs as little-endian floats in header order. Weights are
//! exchanged as `f32`; training state uses the same container with `f64`
//! payloads. The byte layout is documented in `docs/formats.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, TemporalUnet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobDtype {
    F32,
    F64,
}

impl BlobDtype {
    fn byte_width(self) -> usize {
        match self {
            BlobDtype::F32 => 4,
            BlobDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header<Extra> {
    format_version: u32,
    dtype: BlobDtype,
    #[serde(flatten)]
    extra: Extra,
    params: Vec<BlobInfo>,
}

/// Write a named-blob container. Blob order in `blobs` is the on-disk order.
pub(crate) fn write_blob_file<E: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    dtype: BlobDtype,
    extra: &E,
    blobs: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype,
        extra,
        params: blobs
            .iter()
            .map(|(name, shape, _)| BlobInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(magic).map_err(|e| Error::io(path, e))?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&header_json).map_err(|e| Error::io(path, e))?;

    let mut buf = Vec::new();
    for (_, _, values) in blobs {
        buf.clear();
        match dtype {
            BlobDtype::F32 => {
                buf.reserve(values.len() * 4);
                for v in *values {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            BlobDtype::F64 => {
                buf.reserve(values.len() * 8);
                for v in *values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub(crate) struct BlobFile<E> {
    pub extra: E,
    pub blobs: Vec<(BlobInfo, Vec<f64>)>,
}

pub(crate) fn read_blob_file<E: for<'de> Deserialize<'de>>(
    path: &Path,
    magic: &[u8; 8],
) -> Result<BlobFile<E>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    let fail = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(fail("bad magic"));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(fail("truncated header"));
    }
    let header: Header<E> = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| fail(&format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(&format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    let width = header.dtype.byte_width();
    let mut offset = 12 + header_len;
    let mut blobs = Vec::with_capacity(header.params.len());
    for info in header.params {
        let count: usize = info.shape.iter().product();
        let end = offset + count * width;
        if bytes.len() < end {
            return Err(fail(&format!("truncated blob {}", info.name)));
        }
        let mut values = Vec::with_capacity(count);
        match header.dtype {
            BlobDtype::F32 => {
                for chunk in bytes[offset..end].chunks_exact(4) {
                    values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
                }
            }
            BlobDtype::F64 => {
                for chunk in bytes[offset..end].chunks_exact(8) {
                    values.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                }
            }
        }
        offset = end;
        blobs.push((info, values));
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after last blob"));
    }
    Ok(BlobFile {
        extra: header.extra,
        blobs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointExtra {
    config: ModelConfig,
}

/// Save the model weights as an interchangeable `f32` checkpoint.
pub fn save_checkpoint(model: &TemporalUnet, path: &Path) -> Result<()> {
    let registry = model.registry();
    let mut by_id: Vec<Vec<f64>> = vec![Vec::new(); registry.len()];
    model.for_each_param(&mut |id, slice| by_id[id.0] = slice.to_vec());

    let blobs: Vec<(String, Vec<usize>, &[f64])> = registry
        .ids()
        .map(|id| {
            (
                registry.name(id).to_string(),
                registry.shape(id).to_vec(),
                by_id[id.0].as_slice(),
            )
        })
        .collect();
    write_blob_file(
        path,
        CHECKPOINT_MAGIC,
        BlobDtype::F32,
        &CheckpointExtra {
            config: model.config.clone(),
        },
        &blobs,
    )
}

/// Load a checkpoint, rebuilding the model from its embedded config.
pub fn load_checkpoint(path: &Path) -> Result<TemporalUnet> {
    let file: BlobFile<CheckpointExtra> = read_blob_file(path, CHECKPOINT_MAGIC)?;
    let mut model = TemporalUnet::new(file.extra.config, 0)?;
    load_params_into(&mut model, path, &file.blobs)?;
    Ok(model)
}

pub(crate) fn load_params_into(
    model: &mut TemporalUnet,
    path: &Path,
    blobs: &[(BlobInfo, Vec<f64>)],
) -> Result<()> {
    let registry = model.registry().clone();
    if blobs.len() != registry.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "parameter count mismatch: file has {}, model has {}",
                blobs.len(),
                registry.len()
            ),
        });
    }
    for (id, (info, _)) in registry.ids().zip(blobs) {
        if registry.name(id) != info.name || registry.shape(id) != info.shape.as_slice() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "parameter mismatch at {}: file has {} {:?}",
                    registry.name(id),
                    info.name,
                    info.shape
                ),
            });
        }
    }
    model.for_each_param_mut(&mut |id, slice| {
        slice.copy_from_slice(&blobs[id.0].1);
    });
    Ok(())
}

/// Hex SHA-256 of a checkpoint file, used as its identity in provenance notes.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let mut out = String::with_capacity(64);
    for b in hasher.finalize() {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}
