//! Named parameter tensors with gradient slots.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

/// What a tensor is used for; lets optimizers and reports group parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamRole {
    EncoderConv,
    NormAffine,
    Projection,
    RelPosBias,
    RegHeadConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, shape: &[usize], values: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::invalid(format!(
                "parameter {name} has {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let grad = vec![T::zero(); values.len()];
        self.tensors.push(ParamTensor { name, role, shape: shape.to_vec(), values, grad });
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Replace the values of tensor `name`, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.values.len() != values.len() {
            return Err(Error::invalid(format!(
                "parameter {name} expects {} values, got {}",
                t.values.len(),
                values.len()
            )));
        }
        t.values = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    role: t.role,
                    shape: t.shape.clone(),
                    values: t.values.iter().map(|v| U::lit(v.as_f64())).collect(),
                    grad: t.grad.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
