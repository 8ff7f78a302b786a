use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Named parameters, iterated in lexicographic order of their paths.
///
/// The concatenation of all tensors in that order is the flat parameter (or
/// gradient) vector used by clipping, noise injection and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set with this structure from a flat vector.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                left: vec![self.numel()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let mut tensors = BTreeMap::new();
        for (k, v) in &self.tensors {
            let n = v.len();
            tensors.insert(
                k.clone(),
                Tensor::new(v.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(Self { tensors })
    }

    pub fn l2_norm(&self) -> T {
        self.tensors
            .values()
            .map(Tensor::squared_norm)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, c: T) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Self, c: T) -> Result<()> {
        self.check_structure(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += c * y;
            }
        }
        Ok(())
    }

    /// Errors unless both sets have identical names and shapes.
    pub fn check_structure(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::StructureMismatch(format!(
                "{} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::StructureMismatch(format!(
                    "`{ka}` {:?} vs `{kb}` {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// First parameter path holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}
