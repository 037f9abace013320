//! Dense row-major `f64` tensors and named tensor collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds an input tensor. Rejects length mismatches and NaN/Inf values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor input".into()));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for computed values; only the length is checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Rows `[start, start + count)` of a rank-2 tensor.
    pub fn row_slice(&self, start: usize, count: usize) -> Tensor {
        let cols = self.cols();
        Tensor::from_parts(
            vec![count, cols],
            self.data[start * cols..(start + count) * cols].to_vec(),
        )
    }
}

/// Ordered map from parameter name to tensor. Iteration order is the
/// lexicographic key order, which fixes every reduction over a collection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors(BTreeMap<String, Tensor>);

/// Gradient of a scalar with respect to a named parameter collection.
pub type GradientVector = NamedTensors;

impl NamedTensors {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    /// Looks a parameter up, failing with [`Error::MissingParameter`].
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.0.values()
    }

    /// Total number of scalar coordinates.
    pub fn num_values(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.values().fold(0.0, |acc, t| acc + t.sum_sq()).sqrt()
    }

    /// Checks that `other` has exactly the same keys and shapes.
    pub fn check_compatible(&self, other: &NamedTensors) -> Result<()> {
        for (name, t) in &other.0 {
            let mine = self
                .0
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if mine.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: mine.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(missing) = self.0.keys().find(|k| !other.0.contains_key(*k)) {
            return Err(Error::MissingParameter(missing.clone()));
        }
        Ok(())
    }

    /// `self += c * other`, coordinatewise. Shapes must already agree.
    pub fn axpy(&mut self, c: f64, other: &NamedTensors) -> Result<()> {
        self.check_compatible(other)?;
        for (name, t) in &mut self.0 {
            t.axpy(c, &other.0[name]);
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|v| c * v)))
                .collect(),
        )
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for t in self.0.values_mut() {
            t.scale_in_place(c);
        }
    }

    /// Maximum absolute coordinate difference. Key sets must agree.
    pub fn sup_distance(&self, other: &NamedTensors) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .0
            .iter()
            .flat_map(|(k, t)| t.data().iter().zip(other.0[k].data()))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.0
            .values()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Sum of a nonempty list, accumulated left to right.
    pub fn sum(items: &[NamedTensors]) -> Result<NamedTensors> {
        let first = items.first().ok_or(Error::EmptyBatch)?;
        let mut acc = first.clone();
        for g in &items[1..] {
            acc.axpy(1.0, g)?;
        }
        Ok(acc)
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl FromIterator<(String, Tensor)> for NamedTensors {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl From<BTreeMap<String, Tensor>> for NamedTensors {
    fn from(m: BTreeMap<String, Tensor>) -> Self {
        Self(m)
    }
}
