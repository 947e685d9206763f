//! Binary model checkpoints.
//!
//! Layout: `b"RAAC"`, `u32` version, `u32` header length `n`, `n` bytes of
//! JSON header, then every tensor as little-endian `f64` in header order.
//! The header holds the model spec, the tensor table and free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    tensors: Vec<TensorEntry>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Training provenance: fold, epoch, validation score and so on.
    pub meta: Value,
}

pub fn save_checkpoint(model: &Model, meta: &Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let named = model.named();
    let header = Header {
        model: model.spec(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let payload: usize = named.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * payload);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + n)
        .ok_or_else(|| bad("header runs past end of file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::json(path, e))?;
    header.model.mil.validate()?;
    if let Some(raa) = &header.model.raa {
        raa.validate()?;
    }

    // Build a template with the recorded architecture, then overwrite it.
    let mut model = Model::init(&header.model, &mut rng::stream(0, Stream::Init, 0))?;
    let mut slots = model.named_mut();
    if slots.len() != header.tensors.len() {
        return Err(bad(format!(
            "{} tensors recorded, architecture has {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    let mut payload = &bytes[12 + n..];
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match expected `{name}` {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let need = slot.len() * 8;
        if payload.len() < need {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: need,
                actual: payload.len(),
            });
        }
        for (dst, chunk) in slot.data_mut().iter_mut().zip(payload[..need].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if let Some(i) = slot.first_non_finite() {
            return Err(bad(format!("tensor `{name}` has a non-finite value at {i}")));
        }
        payload = &payload[need..];
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes", payload.len())));
    }
    drop(slots);
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}
