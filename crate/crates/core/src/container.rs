//! Versioned binary container shared by model and dataset files.
//!
//! Layout: 5-byte magic (4-byte family tag plus a version digit), a
//! little-endian `u64` header length, the header as canonical JSON (sorted
//! keys, no whitespace), then each tensor's data as little-endian `f64` in
//! the order listed under the header's `tensors` key.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Encodes `header` (which must be a JSON object) and `tensors`.
pub fn encode(magic: &[u8; 5], header: Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let Value::Object(mut map) = header else {
        return Err(Error::Contract("container header must be a JSON object".into()));
    };
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    map.insert("tensors".into(), serde_json::to_value(entries)?);
    // serde_json's default map is ordered by key, which makes this canonical.
    let header_bytes = serde_json::to_vec(&Value::Object(map))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(5 + 8 + header_bytes.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a container, returning the header (without the `tensors` key)
/// and the named tensors in file order.
pub fn decode(magic: &[u8; 5], bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    if bytes.len() < 5 {
        return Err(Error::Corrupt("file shorter than its magic string".into()));
    }
    let found = &bytes[..5];
    if found != magic {
        if found[..4] == magic[..4] {
            return Err(Error::VersionMismatch {
                found: String::from_utf8_lossy(found).into_owned(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        )));
    }
    let len_bytes: [u8; 8] = bytes
        .get(5..13)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Corrupt("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 13usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Corrupt("truncated header".into()))?;
    let mut header: Value = serde_json::from_slice(&bytes[13..header_end])
        .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    let entries: Vec<TensorEntry> = header
        .as_object_mut()
        .and_then(|m| m.remove("tensors"))
        .ok_or_else(|| Error::Corrupt("header lacks a tensor table".into()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| Error::Corrupt(format!("bad tensor table: {e}")))
        })?;
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(entries.len());
    for entry in entries {
        let numel: usize = entry.shape.iter().product();
        let end = offset
            .checked_add(numel * 8)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated data for tensor {}", entry.name)))?;
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape, data)
            .map_err(|e| Error::Corrupt(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name, tensor));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((header, tensors))
}
