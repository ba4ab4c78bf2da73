use alloc::vec;
use alloc::vec::Vec;

use crate::error::dim_err;
use crate::Result;

/// Dense row-major `f64` tensor. Feature maps are `[C, H, W]`, batched
/// feature maps `[B, C, H, W]`, convolution kernels `[Cout, Cin, K, K]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a 3-D tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(dim_err!("expected a [C, H, W] tensor, got {:?}", self.shape)),
        }
    }

    /// Spatial `(H, W)` of the last two axes.
    pub fn spatial(&self) -> (usize, usize) {
        let n = self.shape.len();
        if n < 2 {
            return (1, self.shape.first().copied().unwrap_or(1));
        }
        (self.shape[n - 2], self.shape[n - 1])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Channel slice `[start, start + len)` of a `[C, ...]` tensor.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = *self.shape.first().ok_or_else(|| dim_err!("empty shape"))?;
        if start + len > c {
            return Err(dim_err!("channel range {start}..{} exceeds {c}", start + len));
        }
        let plane: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor { shape, data: self.data[start * plane..(start + len) * plane].to_vec() })
    }
}
