//! Portable tensor container: a JSON header followed by raw little-endian
//! `f32` payload.
//!
//! Layout: magic `FKC1`, a little-endian `u32` header length, the UTF-8
//! JSON header, then the payload. The header carries a format version, a
//! kind tag, arbitrary `meta` JSON (model/gen/calibration configuration),
//! and a tensor manifest of `{name, shape, dtype, offset, len}` entries.
//! Offsets are byte offsets into the payload; they must be unique,
//! non-overlapping, in-bounds, and 4-aligned, and names must be unique —
//! all checked on both write and read, so a round trip is bit-exact or an
//! error.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FKC1";
pub const FORMAT_VERSION: u32 = 1;

/// Manifest entry for one tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count (product of shape).
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// An in-memory container: named `f32` tensors plus free-form metadata.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = &TensorEntry> {
        self.tensors.iter().map(|(e, _)| e)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Append a raw `f32` tensor. Offsets are assigned densely in insertion
    /// order.
    pub fn push_raw(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Container(format!(
                "tensor '{name}': shape {shape:?} holds {len} elements, buffer has {}",
                data.len()
            )));
        }
        if self.tensors.iter().any(|(e, _)| e.name == name) {
            return Err(Error::Container(format!("duplicate tensor name '{name}'")));
        }
        let offset = self.tensors.last().map_or(0, |(e, _)| e.offset + e.len * 4);
        self.tensors.push((
            TensorEntry { name: name.to_string(), shape: shape.to_vec(), dtype: "f32".into(), offset, len },
            data,
        ));
        Ok(())
    }

    /// Append a matrix, narrowing to `f32`.
    pub fn push_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.push_raw(
            name,
            &[m.rows(), m.cols()],
            m.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    /// Append a vector, narrowing to `f32`.
    pub fn push_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push_raw(name, &[v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn get_raw(&self, name: &str) -> Result<(&TensorEntry, &[f32])> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e, d.as_slice()))
            .ok_or_else(|| Error::Container(format!("tensor '{name}' not found")))
    }

    /// Fetch a 2-D tensor widened back to a [`Matrix`].
    pub fn get_matrix(&self, name: &str) -> Result<Matrix> {
        let (entry, data) = self.get_raw(name)?;
        if entry.shape.len() != 2 {
            return Err(Error::Container(format!(
                "tensor '{name}' has shape {:?}, expected a matrix",
                entry.shape
            )));
        }
        Matrix::from_vec(entry.shape[0], entry.shape[1], data.iter().map(|&v| v as f64).collect())
    }

    /// Fetch a 1-D tensor widened to `f64`.
    pub fn get_vector(&self, name: &str) -> Result<Vec<f64>> {
        let (entry, data) = self.get_raw(name)?;
        if entry.shape.len() != 1 {
            return Err(Error::Container(format!(
                "tensor '{name}' has shape {:?}, expected a vector",
                entry.shape
            )));
        }
        Ok(data.iter().map(|&v| v as f64).collect())
    }

    fn validate_manifest(tensors: &[TensorEntry], payload_len: usize) -> Result<()> {
        let mut names = HashSet::new();
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(tensors.len());
        for e in tensors {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Container(format!("duplicate tensor name '{}'", e.name)));
            }
            if e.dtype != "f32" {
                return Err(Error::Container(format!(
                    "tensor '{}' has unsupported dtype '{}'",
                    e.name, e.dtype
                )));
            }
            if e.offset % 4 != 0 {
                return Err(Error::Container(format!("tensor '{}' offset misaligned", e.name)));
            }
            let want: usize = e.shape.iter().product();
            if want != e.len {
                return Err(Error::Container(format!(
                    "tensor '{}' length {} disagrees with shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            let end = e
                .offset
                .checked_add(e.len * 4)
                .ok_or_else(|| Error::Container("offset overflow".into()))?;
            if end > payload_len {
                return Err(Error::Container(format!(
                    "tensor '{}' runs past the payload ({} > {})",
                    e.name, end, payload_len
                )));
            }
            spans.push((e.offset, end, &e.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Container(format!(
                    "tensors '{}' and '{}' overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(())
    }

    /// Serialize to bytes. The manifest is re-validated before writing.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries: Vec<TensorEntry> = self.tensors.iter().map(|(e, _)| e.clone()).collect();
        let payload_len = entries.iter().map(|e| e.len * 4).sum();
        Self::validate_manifest(&entries, payload_len)?;
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Container(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + header_json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Container("bad magic; not a tensor container".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::Container("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| Error::Container(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Container(format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[8 + header_len..];
        Self::validate_manifest(&header.tensors, payload.len())?;
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let raw = &payload[e.offset..e.offset + e.len * 4];
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                (e, data)
            })
            .collect();
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Container::new("data", serde_json::json!({"note": 1}));
        c.push_raw("a", &[2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        c.push_vector("b", &[0.1, 0.2]).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "data");
        let (e, d) = back.get_raw("a").unwrap();
        assert_eq!(e.shape, vec![2, 3]);
        assert_eq!(d, c.get_raw("a").unwrap().1);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_duplicates_and_overlaps() {
        let mut c = Container::new("data", Value::Null);
        c.push_raw("a", &[1], vec![1.0]).unwrap();
        assert!(c.push_raw("a", &[1], vec![2.0]).is_err());

        // Overlapping manifest crafted by hand.
        let header = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "kind": "data",
            "meta": null,
            "tensors": [
                {"name": "x", "shape": [2], "dtype": "f32", "offset": 0, "len": 2},
                {"name": "y", "shape": [2], "dtype": "f32", "offset": 4, "len": 2},
            ],
        });
        let hj = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FKC1");
        bytes.extend_from_slice(&(hj.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&hj);
        bytes.extend_from_slice(&[0u8; 12]);
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_out_of_bounds() {
        assert!(Container::from_bytes(b"nope").is_err());

        let header = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "kind": "data",
            "meta": null,
            "tensors": [
                {"name": "x", "shape": [4], "dtype": "f32", "offset": 0, "len": 4},
            ],
        });
        let hj = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FKC1");
        bytes.extend_from_slice(&(hj.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&hj);
        bytes.extend_from_slice(&[0u8; 8]); // only 2 of 4 elements present
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_tensors(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64), 1..8usize),
                1..6,
            )
        ) {
            let mut c = Container::new("data", Value::Null);
            for (i, (data, _)) in tensors.iter().enumerate() {
                c.push_raw(&format!("t{i}"), &[data.len()], data.clone()).unwrap();
            }
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            for (i, (data, _)) in tensors.iter().enumerate() {
                let (_, got) = back.get_raw(&format!("t{i}")).unwrap();
                prop_assert_eq!(got, data.as_slice());
            }
        }
    }
}
