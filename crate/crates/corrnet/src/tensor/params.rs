//! Named parameter store shared across forward passes.

use super::{Scalar, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Index into a [`Parameters`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub learnable: bool,
}

/// Ordered collection of parameters. Order is fixed at registration time and
/// determines checkpoint layout, so it must be identical across runs.
#[derive(Clone, Debug, Default)]
pub struct Parameters<S> {
    entries: Vec<Parameter<S>>,
}

impl<S: Scalar> Parameters<S> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>, learnable: bool) -> Result<ParamId> {
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            learnable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(S::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[S]) {
        let p = &mut self.entries[id.0];
        if !p.learnable {
            return;
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn total_learnable_elems(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.learnable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// RNG for one parameter, derived from the run seed and the parameter name.
/// Tying the stream to the name keeps shared components identical across
/// model variants that register different parameter sets.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Uniform init in `[-bound, bound]` with `bound = sqrt(1 / fan_in)`.
pub fn uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let data: Vec<S> = (0..super::numel(shape))
        .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("generated data matches shape")
}

/// Uniform init with `bound = sqrt(6 / fan_in)`, preserving activation scale
/// under relu layers.
pub fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data: Vec<S> = (0..super::numel(shape))
        .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("generated data matches shape")
}
