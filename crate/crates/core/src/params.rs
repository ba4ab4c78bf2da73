//! Named learnable tensors.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::cfg_err;
use crate::{Result, Tensor};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(cfg_err!("duplicate parameter name `{name}`"));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(cfg_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / crate::math::sqrt(fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}
