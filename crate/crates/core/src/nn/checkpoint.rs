//! Binary checkpoint format.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "CRCCNN\r\n"
//! 8       4         version (u32 LE) = 1
//! 12      28        architecture: input_side, filters, kernel, pool,
//!                   hidden1, hidden2, classes (7 x u32 LE)
//! 40      4         metadata length M (u32 LE)
//! 44      M         metadata, UTF-8 "key=value\n" lines, keys sorted
//! 44+M    8         parameter count P (u64 LE)
//! 52+M    8P        parameters (f64 LE) in ParamLayout order
//! ```
//!
//! Nothing may follow the parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Architecture, CnnModel, NnError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CRCCNN\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus free-form provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: CnnModel<T>,
    pub metadata: BTreeMap<String, String>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn encode_checkpoint<T: Scalar>(model: &CnnModel<T>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut meta = String::new();
    for (k, v) in metadata {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(corrupt(format!("metadata entry {k:?} cannot be encoded")));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    let a = model.architecture();
    let mut out = Vec::with_capacity(52 + meta.len() + 8 * model.num_params());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [
        a.input_side,
        a.filters,
        a.kernel,
        a.pool,
        a.hidden1,
        a.hidden2,
        a.classes,
    ] {
        let d = u32::try_from(d).map_err(|_| corrupt("architecture dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for &p in model.params() {
        out.extend_from_slice(&p.widen().to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at.saturating_add(n))
            .filter(|s| s.len() == n)
            .ok_or_else(|| corrupt(format!("truncated at offset {} reading {what}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic, not a model checkpoint"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = c.u32("architecture")? as usize;
    }
    let arch = Architecture {
        input_side: dims[0],
        filters: dims[1],
        kernel: dims[2],
        pool: dims[3],
        hidden1: dims[4],
        hidden2: dims[5],
        classes: dims[6],
    };
    arch.validate()?;
    let meta_len = c.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(c.take(meta_len, "metadata")?).map_err(|_| corrupt("metadata is not UTF-8"))?;
    let mut metadata = BTreeMap::new();
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("metadata line {line:?} lacks '='")))?;
        metadata.insert(k.to_string(), v.to_string());
    }
    let b = c.take(8, "parameter count")?;
    let count = u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let expected = arch.layout().len();
    if count != expected as u64 {
        return Err(corrupt(format!(
            "parameter count {count} does not match architecture ({expected})"
        )));
    }
    let raw = c.take(expected * 8, "parameters")?;
    if c.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    let params = raw
        .chunks_exact(8)
        .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
        .collect();
    Ok(Checkpoint {
        model: CnnModel::from_params(arch, params)?,
        metadata,
    })
}

pub fn save_model<T: Scalar>(model: &CnnModel<T>, metadata: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    fs::write(path, bytes).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads and refuses checkpoints whose architecture differs from `expected`.
pub fn load_model_expecting<T: Scalar>(path: &Path, expected: &Architecture) -> Result<Checkpoint<T>> {
    let ck = load_model(path)?;
    if ck.model.architecture() != expected {
        return Err(NnError::ArchitectureMismatch {
            expected: *expected,
            found: *ck.model.architecture(),
        });
    }
    Ok(ck)
}
