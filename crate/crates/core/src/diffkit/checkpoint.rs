//! Parameter checkpoints.
//!
//! Layout (little-endian): magic `MMQK`, version `u32`, then one record per
//! tensor until end of file: name length `u32`, UTF-8 name, rows `u64`,
//! cols `u64`, `rows·cols` `f64` values.

use std::fs;
use std::path::Path;

use super::{ByteReader, Matrix, ParamSet, TensorMap};
use crate::error::{FormatErrorKind, MmqError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMQK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &impl ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut bad = None;
    params.visit_params(&mut |name, m| {
        if bad.is_none() && !m.is_finite() {
            bad = Some(name.to_string());
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    if let Some(name) = bad {
        return Err(MmqError::NonFinite(format!("checkpoint tensor `{name}`")));
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8], origin: &Path) -> Result<TensorMap> {
    let fmt_err = |kind| MmqError::format(origin, kind);
    if bytes.len() < 8 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
            fmt_err(FormatErrorKind::BadMagic)
        } else {
            fmt_err(FormatErrorKind::CorruptHeader(
                "file shorter than header".into(),
            ))
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err(FormatErrorKind::BadMagic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(FormatErrorKind::UnsupportedVersion(version)));
    }
    let mut rd = ByteReader::new(&bytes[8..]);
    let truncated = || fmt_err(FormatErrorKind::TruncatedPayload);
    let mut tensors = Vec::new();
    while !rd.at_end() {
        let name_len = rd.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(rd.take(name_len).ok_or_else(truncated)?)
            .map_err(|_| {
                fmt_err(FormatErrorKind::CorruptHeader(
                    "tensor name is not UTF-8".into(),
                ))
            })?
            .to_string();
        let rows = rd.u64().ok_or_else(truncated)?;
        let cols = rd.u64().ok_or_else(truncated)?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| {
                fmt_err(FormatErrorKind::CorruptHeader(format!(
                    "tensor `{name}` shape overflows"
                )))
            })?;
        let data = rd.f64s(n).ok_or_else(truncated)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(FormatErrorKind::NonFiniteEntry));
        }
        tensors.push((name, Matrix::new(rows as usize, cols as usize, data)?));
    }
    Ok(TensorMap { tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &impl ParamSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(params)?;
    fs::write(path, bytes).map_err(|e| MmqError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MmqError::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Copies checkpoint tensors into `params` by name; every parameter must be
/// present with matching shape.
pub fn restore_params(params: &mut impl ParamSet, tensors: &TensorMap) -> Result<()> {
    let mut failure = None;
    params.visit_params_mut(&mut |name, m| {
        if failure.is_some() {
            return;
        }
        match tensors.get(name) {
            None => failure = Some(MmqError::Missing(format!("checkpoint tensor `{name}`"))),
            Some(t) if t.shape() != m.shape() => {
                failure = Some(MmqError::dim(
                    format!("checkpoint tensor `{name}`"),
                    format!("{}x{}", m.rows(), m.cols()),
                    format!("{}x{}", t.rows(), t.cols()),
                ))
            }
            Some(t) => *m = t.clone(),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
