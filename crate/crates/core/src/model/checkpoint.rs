//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FNET"                      4-byte magic
//! version: u32
//! header_len: u32
//! header: canonical JSON      descriptor + training metadata
//! tensor*:                    name_len: u32, name, rank: u32,
//!                             dims: u32 each, values: f32 each
//! crc32: u32                  IEEE CRC-32 of every preceding byte
//! ```
//!
//! Tensors appear in canonical order (trainables, then batchnorm running
//! stats) and hold 32-bit floats. Parameters live on the f32 grid in memory,
//! so a save/load round-trip reproduces them — and therefore the model's
//! predictions — bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureDescriptor, Model, ModelParams, STATE_TENSORS, TRAINABLE_TENSORS};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNET";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried in the checkpoint header.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    descriptor: ArchitectureDescriptor,
    metadata: CheckpointMeta,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::CheckpointFormat {
        reason: reason.into(),
    }
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        descriptor: model.descriptor.clone(),
        metadata: *meta,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| format_err(format!("header encode: {e}")))?;

    let mut bytes = Vec::with_capacity(header_json.len() + 64);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);

    for name in TRAINABLE_TENSORS.iter().chain(STATE_TENSORS) {
        let tensor = model
            .params
            .tensor(name)
            .ok_or_else(|| format_err(format!("model is missing tensor {name}")))?;
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.dims() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(format_err("file too short to be a checkpoint"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }

    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::CheckpointIntegrity);
    }

    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let header_len = r.u32()? as usize;
    let header_bytes = r.take(header_len)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| format_err(format!("header decode: {e}")))?;
    header.descriptor.validate()?;

    let mut params = ModelParams::zeros_like(&header.descriptor)?;
    let mut seen = std::collections::BTreeSet::new();
    while r.pos < r.bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err("tensor name is not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let shape = Shape::new(dims)?;
        let count = shape.element_count();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let raw: [u8; 4] = r.take(4)?.try_into().unwrap();
            data.push(f32::from_le_bytes(raw) as f64);
        }
        let slot = params
            .tensor_mut(&name)
            .ok_or_else(|| format_err(format!("unknown tensor {name}")))?;
        if slot.shape() != &shape {
            return Err(format_err(format!(
                "tensor {name}: descriptor implies shape {}, file has {shape}",
                slot.shape()
            )));
        }
        *slot = Tensor::from_values(shape, data)?;
        if !seen.insert(name.clone()) {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
    }
    for name in TRAINABLE_TENSORS.iter().chain(STATE_TENSORS) {
        if !seen.contains(*name) {
            return Err(format_err(format!("missing tensor {name}")));
        }
    }

    let model = Model {
        descriptor: header.descriptor,
        params,
        mode: crate::layers::Mode::Infer,
    };
    Ok((model, header.metadata))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
