//! Dense row-major tensors and named parameter/gradient collections.

use std::fmt;

use crate::error::{Error, Result};

/// Dense `f64` tensor in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimension, treating a scalar as a batch of one.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies rows `[start, end)` of the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let row = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor { shape, data: self.data[start * row..end * row].to_vec() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

fn congruent(a: &[(String, Tensor)], b: &[(String, Tensor)], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{what}: {} entries vs {}", a.len(), b.len())));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        if na != nb {
            return Err(Error::ShapeMismatch(format!("{what}: entry {na} vs {nb}")));
        }
        ta.ensure_same_shape(tb, &format!("{what} ({na})"))?;
    }
    Ok(())
}

/// Ordered, uniquely named model parameters tagged with the round that
/// produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    pub version: u64,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        Ok(Self { entries, version: 0 })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn ensure_congruent(&self, other: &ParameterSet) -> Result<()> {
        congruent(&self.entries, &other.entries, "parameter sets")
    }

    /// Appends the entries of `other`, e.g. to reassemble client and server
    /// portions into the full model.
    pub fn concat(&self, other: &ParameterSet) -> Result<ParameterSet> {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        let mut set = ParameterSet::new(entries)?;
        set.version = self.version.max(other.version);
        Ok(set)
    }

    /// Splits off the first `count` entries.
    pub fn split_at(&self, count: usize) -> (ParameterSet, ParameterSet) {
        let (a, b) = self.entries.split_at(count);
        (
            ParameterSet { entries: a.to_vec(), version: self.version },
            ParameterSet { entries: b.to_vec(), version: self.version },
        )
    }

    /// FNV-1a over names, shapes and value bits. Used to compare model
    /// snapshots across clients.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Gradient of a scalar loss with respect to a [`ParameterSet`]; same names
/// and shapes as the parameters it belongs to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    entries: Vec<(String, Tensor)>,
}

impl GradientSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    /// Zero gradient shaped like `params`.
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self { entries: params.entries().iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()))).collect() }
    }

    /// Zero gradient with the same names and shapes.
    pub fn zeroed(&self) -> Self {
        Self { entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()))).collect() }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn extend(&mut self, other: GradientSet) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// ℓ2 norm over the concatenation of all entries.
    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            t.scale(factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) -> Result<()> {
        congruent(&self.entries, &other.entries, "gradient accumulation")?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn ensure_matches(&self, params: &ParameterSet) -> Result<()> {
        congruent(&self.entries, params.entries(), "gradient vs parameters")
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter())
    }
}
