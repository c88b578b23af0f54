//! Run manifest and persisted probability matrices.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crc_core::ProbabilityMatrix;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Sorted `key=value` record of seeds, checksums and versions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}: malformed line {line:?}", path.display()))?;
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let text: String = self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

const PROB_MAGIC: &[u8; 8] = b"CRCPROB1";

/// `CRCPROB1`, rows (u32 LE), cols (u32 LE), then `f64` LE values row-major.
pub fn encode_probs(m: &ProbabilityMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.as_slice().len());
    out.extend_from_slice(PROB_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_probs(bytes: &[u8]) -> Result<ProbabilityMatrix<f64>> {
    if bytes.len() < 16 || &bytes[..8] != PROB_MAGIC {
        bail!("not a probability matrix file");
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into()?) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into()?) as usize;
    let body = &bytes[16..];
    if Some(body.len()) != rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) {
        bail!("probability matrix payload does not match {rows}x{cols}");
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(ProbabilityMatrix::new(rows, cols, values)?)
}

pub fn save_probs(m: &ProbabilityMatrix<f64>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_probs(m)).with_context(|| format!("writing {}", path.display()))
}

pub fn load_probs(path: &Path) -> Result<ProbabilityMatrix<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_probs(&bytes).with_context(|| format!("decoding {}", path.display()))
}
