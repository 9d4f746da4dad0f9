//! Dense double-precision arrays and named parameter sets.

use std::collections::BTreeMap;
use std::fmt;

use super::GraphError;

/// Flat row-major array of `f64` with an explicit shape.
///
/// A scalar is represented by an empty shape (`numel == 1`).
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Array{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Array{:?}[{}, {}, .. ; {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Array { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, GraphError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(GraphError::BadShape(format!(
                "data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    /// C x C identity matrix.
    pub fn eye(c: usize) -> Self {
        let mut a = Array::zeros(&[c, c]);
        for i in 0..c {
            a.data[i * c + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count of a 2-D array.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D array.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Array {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain triple-loop matrix product; `self` is (m,k), `rhs` is (k,n).
    pub fn matmul(&self, rhs: &Array) -> Array {
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        debug_assert_eq!(k, rhs.shape[0]);
        let mut out = Array::zeros(&[m, n]);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Array {
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Array::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn frobenius_distance(&self, other: &Array) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Named mapping from parameter identifier to [`Array`].
///
/// Iteration order is the sorted name order, which keeps every pass over a
/// parameter set deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<(), GraphError> {
        if self.map.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Array) -> Result<(), GraphError> {
        match self.map.get_mut(name) {
            Some(existing) => {
                if existing.shape() != value.shape() {
                    return Err(GraphError::BadShape(format!(
                        "parameter '{}' has shape {:?}, cannot assign {:?}",
                        name,
                        existing.shape(),
                        value.shape()
                    )));
                }
                *existing = value;
                Ok(())
            }
            None => Err(GraphError::UnknownLeaf(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_len(&self) -> usize {
        self.map.values().map(Array::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in &self.map {
            out.map.insert(name.clone(), Array::zeros(value.shape()));
        }
        out
    }

    /// `self += scale * other`, matched by name.
    pub fn axpy(&mut self, scale: f64, other: &ParamSet) {
        for (name, value) in self.map.iter_mut() {
            if let Some(delta) = other.map.get(name) {
                for (v, d) in value.data_mut().iter_mut().zip(delta.data().iter()) {
                    *v += scale * d;
                }
            }
        }
    }

    /// FNV-1a over the raw bit pattern of every value, in name order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, value) in &self.map {
            for b in name.as_bytes() {
                eat(*b);
            }
            for x in value.data() {
                for b in x.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}
