//! Adapter container file.
//!
//! Layout:
//!
//! ```text
//! "FLADPT01"                      8-byte magic
//! u64 little-endian               header length in bytes
//! UTF-8 JSON header               config + entry index
//! payload                         raw little-endian f64, row-major;
//!                                 per entry B then A, at the indexed offset
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterLayerSet, LoraAdapter, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"FLADPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: ModelConfig,
    entries: Vec<EntryIndex>,
    payload_len: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryIndex {
    layer: usize,
    projection: usize,
    b_shape: (usize, usize),
    a_shape: (usize, usize),
    /// Byte offset of B inside the payload; A follows immediately.
    offset: usize,
}

pub fn encode_set(set: &AdapterLayerSet) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (&(layer, projection), adapter) in set.iter() {
        entries.push(EntryIndex {
            layer,
            projection,
            b_shape: adapter.b().shape(),
            a_shape: adapter.a().shape(),
            offset,
        });
        offset += 8 * adapter.param_count();
    }
    let header = Header {
        format: FORMAT_VERSION,
        config: set.config().clone(),
        entries,
        payload_len: offset,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, adapter) in set.iter() {
        for v in adapter.b().as_slice().iter().chain(adapter.a().as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_set(bytes: &[u8]) -> Result<AdapterLayerSet> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::MalformedHeader("missing FLADPT01 magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::MalformedHeader(format!("header length {header_len} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header JSON: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported format {}", header.format)));
    }

    let payload = &bytes[header_end..];
    if payload.len() < header.payload_len {
        return Err(Error::TruncatedPayload {
            expected: header.payload_len,
            found: payload.len(),
        });
    }
    if payload.len() > header.payload_len {
        return Err(Error::DimensionInconsistency(format!(
            "{} trailing bytes after payload",
            payload.len() - header.payload_len
        )));
    }

    let mut entries = BTreeMap::new();
    let mut expected_offset = 0;
    for e in &header.entries {
        if e.offset != expected_offset {
            return Err(Error::DimensionInconsistency(format!(
                "entry ({}, {}) at offset {}, expected {expected_offset}",
                e.layer, e.projection, e.offset
            )));
        }
        if e.b_shape.1 != e.a_shape.0 {
            return Err(Error::DimensionInconsistency(format!(
                "entry ({}, {}): B is {:?} but A is {:?}",
                e.layer, e.projection, e.b_shape, e.a_shape
            )));
        }
        let b_len = e.b_shape.0 * e.b_shape.1;
        let a_len = e.a_shape.0 * e.a_shape.1;
        let end = e.offset + 8 * (b_len + a_len);
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                expected: end,
                found: payload.len(),
            });
        }
        let b = read_matrix(&payload[e.offset..], e.b_shape)?;
        let a = read_matrix(&payload[e.offset + 8 * b_len..], e.a_shape)?;
        if entries
            .insert((e.layer, e.projection), LoraAdapter::new(b, a)?)
            .is_some()
        {
            return Err(Error::DimensionInconsistency(format!(
                "duplicate entry ({}, {})",
                e.layer, e.projection
            )));
        }
        expected_offset = end;
    }
    if expected_offset != header.payload_len {
        return Err(Error::DimensionInconsistency(format!(
            "entries cover {expected_offset} bytes, header declares {}",
            header.payload_len
        )));
    }
    AdapterLayerSet::new(header.config, entries)
}

fn read_matrix(bytes: &[u8], (rows, cols): (usize, usize)) -> Result<Matrix> {
    let data = bytes[..8 * rows * cols]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Writes `set` to `path` in the container format.
pub fn serialize_set(set: &AdapterLayerSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_set(set))?;
    Ok(())
}

pub fn deserialize_set(path: impl AsRef<Path>) -> Result<AdapterLayerSet> {
    decode_set(&fs::read(path)?)
}
