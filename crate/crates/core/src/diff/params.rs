//! Named parameter storage and its binary checkpoint container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "TCKP"
//! version   u16      = 1
//! meta_len  u32      length of the metadata block
//! meta      bytes    UTF-8 (JSON by convention)
//! count     u32      number of tensors
//! count × { name_len u16, name UTF-8, rows u32, cols u32, rows*cols × f64 }
//! ```
//!
//! Tensors are written in name order. Values are raw IEEE-754 bits, so a
//! decode of an encode is bitwise exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::{DiffError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.tensors.values().map(Matrix::frobenius_sq).sum()
    }

    pub fn encode(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + meta.len() + self.num_values() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a container, returning the metadata block and the tensors.
    pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(DiffError::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| DiffError::Checkpoint("metadata is not UTF-8".into()))?
            .to_string();
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| DiffError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let byte_len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| DiffError::Checkpoint(format!("tensor `{name}` too large")))?;
            let raw = r.take(byte_len)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if store.tensors.contains_key(&name) {
                return Err(DiffError::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(DiffError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok((meta, store))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DiffError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trip(
            tensors in proptest::collection::btree_map(
                "[a-z_.0-9]{1,12}",
                (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(any::<f64>(), r * c)
                        .prop_map(move |d| (r, c, d))
                }),
                0..5,
            ),
            meta in ".{0,40}",
        ) {
            let mut store = ParamStore::new();
            for (name, (r, c, d)) in &tensors {
                store.insert(name.clone(), Matrix::from_vec(*r, *c, d.clone()));
            }
            let bytes = store.encode(&meta);
            let (meta2, back) = ParamStore::decode(&bytes).unwrap();
            prop_assert_eq!(meta2, meta);
            // compare bit patterns so NaN payloads count as equal
            for ((n1, a), (n2, b)) in store.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(a.shape(), b.shape());
                let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
            prop_assert_eq!(store.len(), back.len());
        }
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_rows(&[[1.0, 2.0]]));
        let bytes = store.encode("{}");
        for cut in 0..bytes.len() {
            assert!(ParamStore::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParamStore::decode(&extra).is_err());
        assert!(ParamStore::decode(b"XXXX").is_err());
    }

    #[test]
    fn huge_declared_tensor_does_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(ParamStore::decode(&bytes).is_err());
    }
}
