//! Binary container shared by checkpoint and dataset files, plus atomic writes.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON header,
//! then the raw payload bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BAYADCKP";
pub const DATASET_MAGIC: &[u8; 8] = b"BAYADDAT";

pub fn encode(magic: &[u8; 8], header: &serde_json::Value, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a container into its header document and payload.
pub fn decode<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(serde_json::Value, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header = serde_json::from_slice(&bytes[16..end])?;
    Ok((header, &bytes[end..]))
}

pub fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `n` little-endian `f64`s from the front of `bytes`, advancing it.
pub fn take_f64s(bytes: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let need = n * 8;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "payload truncated: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let (head, rest) = bytes.split_at(need);
    *bytes = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn take_i32s(bytes: &mut &[u8], n: usize) -> Result<Vec<i32>> {
    let need = n * 4;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "payload truncated: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let (head, rest) = bytes.split_at(need);
    *bytes = rest;
    Ok(head
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_and_errors() {
        let mut payload = Vec::new();
        push_f64s(&mut payload, &[1.5, -0.0, f64::MIN_POSITIVE]);
        let bytes = encode(DATASET_MAGIC, &serde_json::json!({"a": 1}), &payload).unwrap();
        let (h, mut rest) = decode(DATASET_MAGIC, &bytes).unwrap();
        assert_eq!(h["a"], 1);
        let v = take_f64s(&mut rest, 3).unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert!(rest.is_empty());
        assert!(take_f64s(&mut rest, 1).is_err());
        assert!(decode(CHECKPOINT_MAGIC, &bytes).is_err());
        assert!(decode(DATASET_MAGIC, &bytes[..20]).is_err());
    }
}
