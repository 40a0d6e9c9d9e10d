use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{DiffTensor, Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub tensor: DiffTensor<F>,
}

/// Named trainable tensors in registration order. Registration order is
/// also the order the optimizer visits them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

/// Graph leaves for every parameter of one store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: DiffTensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, tensor: tensor.with_requires_grad(true) });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor<F> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Result<Bound> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect::<Result<Vec<_>>>().map(Bound)
    }

    /// Copies gradients of a finished backward pass into the parameters.
    /// Parameters the loss did not reach get a zero gradient.
    pub fn collect_grads(&mut self, g: &Graph<F>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            let grad = match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![F::zero(); p.tensor.numel()],
            };
            p.tensor.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Content hash over names, shapes and values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast() })
                .collect(),
        }
    }
}

/// Uniform initialization in `[-1/√fan_in, 1/√fan_in]`. Values are drawn in
/// 64-bit and rounded, so both precisions see the same draws.
pub fn init_uniform<F: Real>(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> DiffTensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    DiffTensor::from_f64(shape, &data).expect("bounded draws are finite")
}
