//! Checkpoint file: a JSON manifest (format version, arch descriptor, named
//! array shapes and byte offsets) followed by raw little-endian f32 data.
//! Save/load round-trips are bit-exact.

use super::{Arch, ModelState, Param, ParamGroup};
use crate::error::{IdmError, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"IDMCKPT\x01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    arch: Arch,
    num_classes: usize,
    feat_dim: usize,
    entries: Vec<EntryMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    is_bias: bool,
    /// Offset into the payload, in f32 elements.
    offset: usize,
    len: usize,
}

/// Write the model (cast to f32) to `path`.
pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(state.params.len());
    let mut offset = 0usize;
    for p in &state.params {
        entries.push(EntryMeta {
            name: p.name.clone(),
            shape: p.shape.clone(),
            group: p.group,
            is_bias: p.is_bias,
            offset,
            len: p.data.len(),
        });
        offset += p.data.len();
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: state.arch.clone(),
        num_classes: state.arch.num_classes,
        feat_dim: state.arch.feat_dim,
        entries,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| IdmError::Checkpoint(e.to_string()))?;

    let mut file = fs::File::create(path).map_err(|e| IdmError::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| IdmError::io(path, e))?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())
        .map_err(|e| IdmError::io(path, e))?;
    file.write_all(&manifest_json)
        .map_err(|e| IdmError::io(path, e))?;
    let mut payload = Vec::with_capacity(offset * 4);
    for p in &state.params {
        for &v in &p.data {
            let f = v.to_f32().expect("scalar to f32");
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(|e| IdmError::io(path, e))?;
    Ok(())
}

/// Read a checkpoint back into the requested working precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let mut file = fs::File::open(path).map_err(|e| IdmError::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| IdmError::io(path, e))?;
    if &magic != MAGIC {
        return Err(IdmError::Checkpoint(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| IdmError::io(path, e))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)
        .map_err(|e| IdmError::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| IdmError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(IdmError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| IdmError::io(path, e))?;

    let total: usize = manifest.entries.iter().map(|e| e.len).sum();
    if payload.len() != total * 4 {
        return Err(IdmError::Checkpoint(format!(
            "payload length {} does not match manifest total {}",
            payload.len(),
            total * 4
        )));
    }
    let mut params = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let expected: usize = entry.shape.iter().product();
        if expected != entry.len {
            return Err(IdmError::Checkpoint(format!(
                "{}: shape {:?} does not cover {} elements",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| {
                let f = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                T::from(f).expect("f32 into scalar")
            })
            .collect();
        params.push(Param {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
            group: entry.group,
            is_bias: entry.is_bias,
        });
    }
    Ok(ModelState {
        arch: manifest.arch,
        params,
    })
}
