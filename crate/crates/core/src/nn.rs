//! Parameterised layers: thin wrappers that own [`ParamId`]s and emit tape ops.

use alloc::format;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::{Result, Tensor};

/// Same-padded convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        let cin_g = cin / groups;
        let w = uniform_fan_in(rng, &[cout, cin_g, kernel, kernel], cin_g * kernel * kernel);
        let weight = store.add(&format!("{name}.weight"), w)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias, groups })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.groups)
    }
}

/// Transposed convolution whose kernel equals its stride.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
    ) -> Result<Self> {
        let w = uniform_fan_in(rng, &[cin, cout, factor, factor], cin);
        let weight = store.add(&format!("{name}.weight"), w)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose(x, w, Some(b))
    }
}

/// Channel layer norm with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::filled(&[channels], 1.0))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}
