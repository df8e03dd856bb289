use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use sha2::{Digest, Sha256};

/// Dense 2-D array of `f64`. Vectors are stored as single rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Array2<f64>,
}

impl Tensor {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    /// Build from a shape and a row-major buffer. Returns `None` when the
    /// buffer length disagrees with the shape.
    pub fn from_vec(shape: [usize; 2], data: Vec<f64>) -> Option<Self> {
        Array2::from_shape_vec((shape[0], shape[1]), data).ok().map(Self::new)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.data.nrows(), self.data.ncols()]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Row-major little-endian bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 8);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// SHA-256 over the shape and the little-endian data bytes.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for d in self.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }
}

impl From<Array2<f64>> for Tensor {
    fn from(data: Array2<f64>) -> Self {
        Self::new(data)
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace. Insertion order is preserved for new names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Per-tensor SHA-256 digests keyed by name.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.iter().map(|(n, t)| (n.to_string(), t.sha256())).collect()
    }
}
