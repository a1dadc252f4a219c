//! Shared binary container layout for synthetic sets, checkpoints and
//! datasets:
//!
//! ```text
//! magic       4 bytes
//! version     u32 little-endian
//! header_len  u32 little-endian
//! header      header_len bytes of UTF-8 JSON
//! payload     f64 little-endian values to end of file
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its header and payload. `payload_len` receives
/// the parsed header and returns how many values must follow.
pub fn decode<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    bytes: &[u8],
    payload_len: impl FnOnce(&H) -> usize,
) -> Result<(H, Vec<f64>)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 12 {
        return Err(bad(format!("truncated container: {} bytes", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(bad(format!("header truncated at offset {}", bytes.len())));
    }
    let header: H = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| bad(format!("bad header: {e}")))?;
    let expected = payload_len(&header);
    let got = bytes.len() - body;
    if got != expected * 8 {
        return Err(bad(format!(
            "payload is {got} bytes, header declares {expected} values ({} bytes)",
            expected * 8
        )));
    }
    let payload = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write_file<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    payload_len: impl FnOnce(&H) -> usize,
) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, magic, &bytes, payload_len)
}
