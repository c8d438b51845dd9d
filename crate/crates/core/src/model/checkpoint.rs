//! ZRCG checkpoint container.
//!
//! ```text
//! "ZRCG" | u32 version | u64 header length H | H bytes JSON header
//!        | u32 tensor count | per tensor: u32 name length, name, u32 rows, u32 cols, f32 data
//!        | u32 CRC32 of everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderKind, MergeMode, ModelError, ModelParams, ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZRCG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Descriptive fields carried alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub source_domain: String,
    pub fusion: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    d_h: usize,
    d_l: usize,
    encoder: EncoderKind,
    max_seq_len: usize,
    merge: MergeMode,
    variant: String,
    source_domain: String,
    fusion: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = &self.params.spec;
        let header = Header {
            d_h: spec.d_h,
            d_l: spec.d_l,
            encoder: spec.encoder,
            max_seq_len: spec.max_seq_len,
            merge: spec.merge,
            variant: self.meta.variant.clone(),
            source_domain: self.meta.source_domain.clone(),
            fusion: self.meta.fusion,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = self.params.weights.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        if bytes.len() < 12 {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(ModelError::Crc { stored, computed });
        }
        let mut rd = Reader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let hlen = rd.u64()? as usize;
        let header: Header = serde_json::from_slice(rd.take(hlen)?)
            .map_err(|e| ModelError::Format(format!("header: {e}")))?;
        let spec = ModelSpec {
            d_h: header.d_h,
            d_l: header.d_l,
            encoder: header.encoder,
            max_seq_len: header.max_seq_len,
            merge: header.merge,
        };
        spec.validate()?;
        let mut weights = ParamSet::<f32>::zeros(&spec);
        let count = rd.u32()? as usize;
        {
            let mut slots = weights.tensors_mut();
            if count != slots.len() {
                return Err(ModelError::Format(format!(
                    "expected {} tensors, found {count}",
                    slots.len()
                )));
            }
            for (expected_name, slot) in slots.iter_mut() {
                let nlen = rd.u32()? as usize;
                let name = std::str::from_utf8(rd.take(nlen)?)
                    .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
                if name != *expected_name {
                    return Err(ModelError::Format(format!(
                        "expected tensor {expected_name}, found {name}"
                    )));
                }
                let rows = rd.u32()? as usize;
                let cols = rd.u32()? as usize;
                if (rows, cols) != slot.shape() {
                    return Err(ModelError::DimMismatch {
                        what: expected_name,
                        expected: slot.len(),
                        found: rows * cols,
                    });
                }
                let raw = rd.take(rows * cols * 4)?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                **slot = Tensor::from_vec(rows, cols, data);
            }
        }
        if rd.pos != body_end {
            return Err(ModelError::Format("trailing bytes after tensors".into()));
        }
        let params = ModelParams { spec, weights };
        if !params.is_finite() {
            return Err(ModelError::NonFinite("checkpoint tensors"));
        }
        Ok(Self {
            params,
            meta: CheckpointMeta {
                variant: header.variant,
                source_domain: header.source_domain,
                fusion: header.fusion,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored dimensions match `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelSpec) -> Result<Self, ModelError> {
        let ck = Self::load(path)?;
        let got = &ck.params.spec;
        if got.d_h != expected.d_h {
            return Err(ModelError::DimMismatch {
                what: "checkpoint d_h",
                expected: expected.d_h,
                found: got.d_h,
            });
        }
        if got.d_l != expected.d_l {
            return Err(ModelError::DimMismatch {
                what: "checkpoint d_l",
                expected: expected.d_l,
                found: got.d_l,
            });
        }
        Ok(ck)
    }
}
