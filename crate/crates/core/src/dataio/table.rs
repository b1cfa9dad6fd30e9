//! Embedding table file format.
//!
//! Layout (little-endian): magic `MMQE`, version `u32`, tag byte, rows `u64`,
//! cols `u64`, `rows·cols` `f64` values, then a CRC-32 (IEEE) of every
//! preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Modality;
use crate::diffkit::{ByteReader, Matrix};
use crate::error::{FormatErrorKind, MmqError, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"MMQE";
pub const TABLE_VERSION: u32 = 1;

/// What a stored table holds. The byte value is the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableTag {
    Modality(Modality),
    /// Target-item table of the recommender.
    Target,
    /// A codebook level of the quantizer.
    Code,
}

impl TableTag {
    pub fn to_byte(self) -> u8 {
        match self {
            TableTag::Modality(m) => m.index() as u8,
            TableTag::Target => 3,
            TableTag::Code => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => TableTag::Modality(Modality::Collaborative),
            1 => TableTag::Modality(Modality::Text),
            2 => TableTag::Modality(Modality::Visual),
            3 => TableTag::Target,
            4 => TableTag::Code,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub tag: TableTag,
    pub data: Matrix,
    pub provenance: String,
}

impl EmbeddingTable {
    pub fn new(tag: TableTag, data: Matrix, provenance: impl Into<String>) -> Result<Self> {
        if !data.is_finite() {
            return Err(MmqError::NonFinite(format!("embedding table ({tag:?})")));
        }
        Ok(EmbeddingTable {
            tag,
            data,
            provenance: provenance.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

pub fn table_bytes(table: &EmbeddingTable) -> Result<Vec<u8>> {
    if !table.data.is_finite() {
        return Err(MmqError::NonFinite(format!(
            "embedding table `{}`: refusing to save non-finite entries",
            table.provenance
        )));
    }
    let mut out = Vec::with_capacity(29 + table.data.len() * 8 + 4);
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.push(table.tag.to_byte());
    out.extend_from_slice(&(table.data.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(table.data.cols() as u64).to_le_bytes());
    for v in table.data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn parse_table(bytes: &[u8], origin: &Path) -> Result<EmbeddingTable> {
    let err = |kind| MmqError::format(origin, kind);
    let mut rd = ByteReader::new(bytes);
    let header = || FormatErrorKind::CorruptHeader("file shorter than header".into());
    let magic = rd.take(4).ok_or_else(|| err(header()))?;
    if magic != TABLE_MAGIC {
        return Err(err(FormatErrorKind::BadMagic));
    }
    let version = rd.u32().ok_or_else(|| err(header()))?;
    if version != TABLE_VERSION {
        return Err(err(FormatErrorKind::UnsupportedVersion(version)));
    }
    let tag_byte = rd.u8().ok_or_else(|| err(header()))?;
    let tag = TableTag::from_byte(tag_byte).ok_or_else(|| {
        err(FormatErrorKind::CorruptHeader(format!(
            "unknown table tag {tag_byte}"
        )))
    })?;
    let rows = rd.u64().ok_or_else(|| err(header()))?;
    let cols = rd.u64().ok_or_else(|| err(header()))?;
    let n = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| {
            err(FormatErrorKind::CorruptHeader(format!(
                "shape {rows}x{cols} overflows"
            )))
        })?;
    if rd.remaining() < n * 8 + 4 {
        return Err(err(FormatErrorKind::TruncatedPayload));
    }
    let data = rd
        .f64s(n)
        .ok_or_else(|| err(FormatErrorKind::TruncatedPayload))?;
    let body_len = bytes.len() - rd.remaining();
    let crc = rd
        .u32()
        .ok_or_else(|| err(FormatErrorKind::TruncatedPayload))?;
    if !rd.at_end() {
        return Err(err(FormatErrorKind::CorruptHeader(
            "trailing bytes after checksum".into(),
        )));
    }
    if crc32fast::hash(&bytes[..body_len]) != crc {
        return Err(err(FormatErrorKind::ChecksumMismatch));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(err(FormatErrorKind::NonFiniteEntry));
    }
    Ok(EmbeddingTable {
        tag,
        data: Matrix::new(rows as usize, cols as usize, data)?,
        provenance: origin.display().to_string(),
    })
}

pub fn save_table(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let bytes = table_bytes(table)?;
    fs::write(path, bytes).map_err(|e| MmqError::io(path, e))
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MmqError::io(path, e))?;
    parse_table(&bytes, path)
}
