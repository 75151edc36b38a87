//! Container files: a magic line, the header length in bytes, a JSON header,
//! then a little-endian f64 blob running to the end of the file.
//!
//! ```text
//! attack-search model v1\n
//! 1234\n
//! {...1234 bytes of JSON...}\n
//! <8-byte little-endian f64 values>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &str = "attack-search tensor v1";

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_container<H: Serialize>(magic: &str, header: &H, blob: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + blob.len() * 8 + 64);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.len().to_string().as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&json);
    out.push(b'\n');
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_container<H: DeserializeOwned>(
    path: &Path,
    magic: &str,
    bytes: &[u8],
) -> Result<(H, Vec<f64>)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut rest = bytes;
    let mut line = || -> Result<&[u8]> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated preamble"))?;
        let l = &rest[..end];
        rest = &rest[end + 1..];
        Ok(l)
    };
    if line()? != magic.as_bytes() {
        return Err(bad(&format!("expected magic line {magic:?}")));
    }
    let len: usize = std::str::from_utf8(line()?)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("header length is not an integer"))?;
    if rest.len() < len + 1 || rest[len] != b'\n' {
        return Err(bad("header length does not match contents"));
    }
    let header: H =
        serde_json::from_slice(&rest[..len]).map_err(|e| bad(&format!("header: {e}")))?;
    let blob = &rest[len + 1..];
    if blob.len() % 8 != 0 {
        return Err(bad("blob length is not a multiple of 8"));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &str) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(path, magic, &bytes)
}

pub fn write_container<H: Serialize>(path: &Path, magic: &str, header: &H, blob: &[f64]) -> Result<()> {
    write_atomic(path, &encode_container(magic, header, blob)?)
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let header = TensorHeader {
        shape: t.shape().to_vec(),
    };
    write_container(path, TENSOR_MAGIC, &header, t.data())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let (h, data): (TensorHeader, _) = read_container(path, TENSOR_MAGIC)?;
    Tensor::new(h.shape, data).map_err(|e| Error::format(path, e.to_string()))
}
