//! Binary container shared by every persisted model.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` header length, the UTF-8 JSON header, then each tensor
//! listed in the header's manifest as consecutive little-endian `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded container: the caller's metadata plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&(TensorEntry, Vec<f64>)> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }
}

pub fn encode(metadata: Value, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("tensor {name:?} shape {shape:?} does not match {} values", data.len())));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += 8 * data.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        metadata,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let truncated = || Error::Checkpoint("file is truncated".into());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(truncated)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes.get(12..20).ok_or_else(truncated)?.try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(truncated)?;
    let header: Header = serde_json::from_slice(bytes.get(20..header_end).ok_or_else(truncated)?)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    let payload = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0usize;
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        if start != expected_offset {
            return Err(Error::Checkpoint(format!("tensor {:?} has an inconsistent offset", entry.name)));
        }
        let end = start + 8 * len;
        let raw = payload.get(start..end).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        expected_offset = end;
        tensors.push((entry, data));
    }
    if expected_offset != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(Container {
        metadata: header.metadata,
        tensors,
    })
}

pub fn write(path: impl AsRef<Path>, metadata: Value, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<()> {
    let bytes = encode(metadata, tensors)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Container> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = [1.0, -2.5, f64::MIN_POSITIVE];
        let b = [0.1; 4];
        encode(
            serde_json::json!({"kind": "demo"}),
            &[("a".into(), vec![3], &a), ("b".into(), vec![2, 2], &b)],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = decode(&sample()).unwrap();
        assert_eq!(c.metadata["kind"], "demo");
        assert_eq!(c.tensor("a").unwrap().1, vec![1.0, -2.5, f64::MIN_POSITIVE]);
        assert_eq!(c.tensor("b").unwrap().0.shape, vec![2, 2]);
        assert!(c.tensor("c").is_err());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let mut bad_magic = sample();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).unwrap_err().to_string().contains("magic"));

        let good = sample();
        let short = &good[..good.len() - 3];
        assert!(decode(short).unwrap_err().to_string().contains("truncated"));

        let mut bumped = sample();
        bumped[8] = 9;
        assert!(decode(&bumped).unwrap_err().to_string().contains("version"));

        let mut long = sample();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn shape_must_match_data() {
        let a = [1.0, 2.0];
        assert!(encode(Value::Null, &[("a".into(), vec![3], &a)]).is_err());
    }
}
