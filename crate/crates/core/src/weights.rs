//! Named weight maps and the `TAATW001` binary container.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! magic   8 bytes  "TAATW001"
//! count   u32
//! entry*  u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//!         product(dims) x f32 values
//! ```

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub const MAGIC: &[u8; 8] = b"TAATW001";

#[derive(Clone, Debug, PartialEq)]
pub struct WeightArray {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl WeightArray {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != values.len() {
            return Err(Error::shape(format!(
                "{} values for weight dims {:?}",
                values.len(),
                dims
            )));
        }
        Ok(WeightArray { dims, values })
    }

    pub fn vector(values: Vec<f32>) -> Self {
        WeightArray {
            dims: vec![values.len()],
            values,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        WeightArray {
            dims: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        WeightArray {
            dims: vec![m.rows, m.cols],
            values: m.data.clone(),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        let shape: [usize; 4] = self
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("weight dims {:?} are not rank 4", self.dims)))?;
        Tensor::new(shape, self.values)
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            &[r, c] => Matrix::new(r, c, self.values),
            d => Err(Error::shape(format!("weight dims {d:?} are not rank 2"))),
        }
    }
}

/// Ordered map of parameter name to array; iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    entries: IndexMap<String, WeightArray>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: WeightArray) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Weights(format!("duplicate weight name {name:?}")));
        }
        self.entries.insert(name, array);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, array: WeightArray) {
        self.entries.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&WeightArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut WeightArray> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Drops every entry whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ModelWeights {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ModelWeights) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(array.dims.len() as u8);
            for &d in &array.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &array.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected TAATW001"));
        }
        let count = r.u32("entry count")?;
        let mut weights = ModelWeights::new();
        for i in 0..count {
            let entry_start = r.pos as u64;
            let name_len = r.u16("name length")? as usize;
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(entry_start + 2, format!("entry {i} name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(r.pos as u64, format!("entry {name:?} dims overflow")))?;
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::format(r.pos as u64, "value count overflow"))?,
                "values",
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if weights.contains(&name) {
                return Err(Error::format(entry_start, format!("duplicate weight name {name:?}")));
            }
            weights.entries.insert(name, WeightArray { dims, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            ));
        }
        Ok(weights)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, weights.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::decode(&bytes)
}

/// Hands out weights by name and remembers which ones were used, so that a
/// model build can insist on consuming the file exactly.
pub struct WeightReader<'a> {
    weights: &'a ModelWeights,
    consumed: HashSet<String>,
}

impl<'a> WeightReader<'a> {
    pub fn new(weights: &'a ModelWeights) -> Self {
        WeightReader {
            weights,
            consumed: HashSet::new(),
        }
    }

    pub fn take(&mut self, name: &str, dims: &[usize]) -> Result<WeightArray> {
        let array = self
            .weights
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing weight {name:?}")))?;
        if array.dims != dims {
            return Err(Error::Weights(format!(
                "weight {name:?} has dims {:?}, expected {:?}",
                array.dims, dims
            )));
        }
        if !self.consumed.insert(name.to_string()) {
            return Err(Error::Weights(format!("weight {name:?} consumed twice")));
        }
        Ok(array.clone())
    }

    pub fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        Ok(self.take(name, &[len])?.values)
    }

    pub fn tensor(&mut self, name: &str, shape: [usize; 4]) -> Result<Tensor> {
        self.take(name, &shape)?.into_tensor()
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        self.take(name, &[rows, cols])?.into_matrix()
    }

    /// Fails if any weight in the map was never requested.
    pub fn finish(self) -> Result<()> {
        let unused: Vec<&str> = self
            .weights
            .names()
            .filter(|n| !self.consumed.contains(*n))
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Weights(format!(
                "{} unconsumed weights: {}",
                unused.len(),
                unused.join(", ")
            )))
        }
    }
}
