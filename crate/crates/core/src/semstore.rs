//! Raw semantic item embeddings and the SEMB v1 container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SEMB" | u32 version=1 | u32 count | u32 dim | u64 S | S bytes JSON array of ids
//!        | count*dim f32 row-major | u32 CRC32 of everything before it
//! ```

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Corpus;

pub const SEMB_MAGIC: &[u8; 4] = b"SEMB";
pub const SEMB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum SemStoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad-magic: not a SEMB file")]
    BadMagic,
    #[error("unsupported-version: {0}")]
    UnsupportedVersion(u32),
    #[error("zero-dim: embedding dimension must be positive")]
    ZeroDim,
    #[error("truncated-header")]
    TruncatedHeader,
    #[error("string-table: {0}")]
    StringTable(String),
    #[error("count-mismatch: header declares {declared} rows, string table has {found} ids")]
    CountMismatch { declared: usize, found: usize },
    #[error("payload-size-mismatch: expected {expected} payload bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("checksum-mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("unbound-items: {} corpus items have no embedding (first: {:?})", .0.len(), .0.first())]
    Unbound(Vec<String>),
}

impl SemStoreError {
    /// Stable short code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            SemStoreError::Io { .. } => "io",
            SemStoreError::BadMagic => "bad-magic",
            SemStoreError::UnsupportedVersion(_) => "unsupported-version",
            SemStoreError::ZeroDim => "zero-dim",
            SemStoreError::TruncatedHeader => "truncated-header",
            SemStoreError::StringTable(_) => "string-table",
            SemStoreError::CountMismatch { .. } => "count-mismatch",
            SemStoreError::PayloadSizeMismatch { .. } => "payload-size-mismatch",
            SemStoreError::ChecksumMismatch { .. } => "checksum-mismatch",
            SemStoreError::NonFinite { .. } => "nan-detected",
            SemStoreError::DuplicateId(_) => "duplicate-id",
            SemStoreError::Unbound(_) => "unbound-items",
        }
    }
}

/// Item-aligned matrix of raw semantic embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl SemanticStore {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self, SemStoreError> {
        if dim == 0 {
            return Err(SemStoreError::ZeroDim);
        }
        if data.len() != ids.len() * dim {
            return Err(SemStoreError::PayloadSizeMismatch {
                expected: ids.len() * dim * 4,
                found: data.len() * 4,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SemStoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(SemStoreError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            dim,
            ids,
            data,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, item_id: &str) -> Option<&[f32]> {
        self.index.get(item_id).map(|&i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let table = serde_json::to_vec(&self.ids).expect("id list serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + table.len() + self.data.len() * 4 + 4);
        out.extend_from_slice(SEMB_MAGIC);
        out.extend_from_slice(&SEMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(table.len() as u64).to_le_bytes());
        out.extend_from_slice(&table);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SemStoreError> {
        if bytes.len() < 4 || &bytes[..4] != SEMB_MAGIC {
            return Err(SemStoreError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(SemStoreError::TruncatedHeader);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != SEMB_VERSION {
            return Err(SemStoreError::UnsupportedVersion(version));
        }
        let count = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        if dim == 0 {
            return Err(SemStoreError::ZeroDim);
        }
        let table_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let table_end = HEADER_LEN
            .checked_add(table_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| SemStoreError::StringTable("string table runs past end of file".into()))?;
        let ids: Vec<String> = serde_json::from_slice(&bytes[HEADER_LEN..table_end])
            .map_err(|e| SemStoreError::StringTable(e.to_string()))?;
        if ids.len() != count {
            return Err(SemStoreError::CountMismatch {
                declared: count,
                found: ids.len(),
            });
        }
        let expected = count * dim * 4;
        let found = bytes.len().saturating_sub(table_end + 4);
        if bytes.len() < table_end + 4 || found != expected {
            return Err(SemStoreError::PayloadSizeMismatch { expected, found });
        }
        let body_end = table_end + expected;
        let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(SemStoreError::ChecksumMismatch { stored, computed });
        }
        let data: Vec<f32> = bytes[table_end..body_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, ids, data)
    }

    pub fn load(path: &Path) -> Result<Self, SemStoreError> {
        let bytes = std::fs::read(path).map_err(|e| SemStoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), SemStoreError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SemStoreError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Resolves every corpus item to a row. Rows for items outside the corpus
    /// are not carried into the result.
    pub fn bind(&self, corpus: &Corpus) -> Result<BoundEmbeddings, SemStoreError> {
        let mut missing = Vec::new();
        let mut data = Vec::with_capacity(corpus.n_items() * self.dim);
        for it in corpus.items() {
            match self.get(&it.item_id) {
                Some(row) => data.extend_from_slice(row),
                None => missing.push(it.item_id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(SemStoreError::Unbound(missing));
        }
        Ok(BoundEmbeddings {
            dim: self.dim,
            data,
        })
    }
}

/// Raw embeddings laid out in corpus item order.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundEmbeddings {
    dim: usize,
    data: Vec<f32>,
}

impl BoundEmbeddings {
    /// Row-major rows already in corpus item order.
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self, SemStoreError> {
        if dim == 0 {
            return Err(SemStoreError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(SemStoreError::PayloadSizeMismatch {
                expected: data.len() / dim * dim,
                found: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(SemStoreError::NonFinite {
                row: k / dim,
                col: k % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, item: usize) -> &[f32] {
        &self.data[item * self.dim..(item + 1) * self.dim]
    }
}
