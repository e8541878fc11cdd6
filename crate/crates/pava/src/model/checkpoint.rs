//! Checkpoint container.
//!
//! Layout: magic `PAVACKPT`, version (u32 LE), header length (u64 LE), a
//! JSON header `{spec, config, provenance, tensors: [{name, len}]}`, then
//! every tensor as f64 LE in header order. The tensors are the learned
//! parameters followed by the batch-norm running statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, FeatureExtractorSpec, Provenance, TrainedModel};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"PAVACKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: FeatureExtractorSpec,
    config: ClassifierConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    model.params.visit_all(&mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            len: t.len(),
        });
        for v in t {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        config: model.config.clone(),
        provenance: model.provenance.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + blob.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, out).map_err(Error::io(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(e.to_string()))?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if bytes.len() != header_end + total * 8 {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            total * 8,
            bytes.len() - header_end
        )));
    }

    let mut model = TrainedModel::new(header.spec, header.config, 0).map_err(|e| bad(e.to_string()))?;
    model.provenance = header.provenance;
    let mut k = 0;
    let mut offset = header_end;
    let mut mismatch = None;
    model.params.visit_all_mut(&mut |name, dst| {
        if mismatch.is_some() {
            return;
        }
        match header.tensors.get(k) {
            Some(e) if e.name == name && e.len == dst.len() => {
                for (i, v) in dst.iter_mut().enumerate() {
                    let at = offset + i * 8;
                    *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                }
                offset += e.len * 8;
            }
            other => {
                mismatch = Some(format!(
                    "tensor {k}: expected `{name}` ({} values), found {:?}",
                    dst.len(),
                    other.map(|e| (&e.name, e.len))
                ))
            }
        }
        k += 1;
    });
    if let Some(m) = mismatch {
        return Err(bad(m));
    }
    if k != header.tensors.len() {
        return Err(bad(format!("{} tensors in file, model has {k}", header.tensors.len())));
    }
    Ok(model)
}
