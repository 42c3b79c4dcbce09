//! The `AMFW` weight file.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "AMFW" count
//! repeated count times:
//!     name_len name(utf-8) rank extent[rank] data(f32 LE, row-major)
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"AMFW";

/// Ordered collection of named tensors as stored in a weight file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightTable {
    entries: Vec<(String, Tensor)>,
}

impl WeightTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "AMFW",
            });
        }
        let count = r.u32()? as usize;
        let mut table = WeightTable::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Validation(format!("{}: tensor name is not UTF-8", path.display())))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Validation(format!("{}: extents of `{name}` overflow", path.display())))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.truncated("tensor data"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            table.entries.push((name, Tensor::from_parts(shape, data)));
        }
        Ok(table)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn truncated(&self, what: &str) -> Error {
        Error::Truncated {
            path: self.path.to_path_buf(),
            detail: format!("ran out of bytes reading {what} at offset {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.truncated(&format!("{n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(table: &WeightTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    WeightTable::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn f32_exact(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut seeded(seed)).map(|v| v as f32 as f64)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.amfw");
        let mut table = WeightTable::new();
        table.insert("a.w", f32_exact(vec![3, 4], 1));
        table.insert("b", f32_exact(vec![5], 2));
        table.insert("s", f32_exact(vec![], 3));
        save_weights(&table, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.amfw");
        let mut table = WeightTable::new();
        table.insert("w", f32_exact(vec![4, 4], 1));
        let mut bytes = table.to_bytes();

        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Truncated { .. })));

        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unknown_name_lookup_fails() {
        let table = WeightTable::new();
        assert!(matches!(table.get("nope"), Err(Error::UnknownTensor(_))));
    }
}
