use crate::error::{Error, Result};

use super::Real;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn ensure_finite<F: Real>(data: &[F], what: &str) -> Result<()> {
    // `x - x` is zero for finite `x` and NaN otherwise. Independent lanes
    // keep the loop branch-free and vectorizable.
    let mut lanes = [F::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l += x - x;
        }
    }
    let mut acc = tail.iter().fold(F::zero(), |a, &x| a + (x - x));
    for l in lanes {
        acc += l;
    }
    if acc == F::zero() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> DiffTensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![F::zero(); n], requires_grad: false, grad: None }
    }

    pub fn scalar(x: F) -> Self {
        Self { shape: vec![], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<G: Real>(&self) -> DiffTensor<G> {
        DiffTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| G::of(x.as_f64())).collect()),
        }
    }
}
