use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with paired gradient storage.
///
/// Gradient accumulation is additive; callers zero grads between
/// optimizer steps.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of uniquely named parameters. Registration order is
/// the canonical order used by the optimizer and the checkpoint format.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, NumericsError> {
        if self.by_name.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        self.params[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Scale gradients so their global L2 norm (over `selected` parameters,
    /// or all) does not exceed `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: T, selected: Option<&[bool]>) -> T {
        let picked = |i: usize| selected.map_or(true, |mask| mask[i]);
        let mut total = T::zero();
        for (i, p) in self.params.iter().enumerate() {
            if picked(i) {
                for &g in p.grad.data() {
                    total = total + g * g;
                }
            }
        }
        let norm = total.sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for (i, p) in self.params.iter_mut().enumerate() {
                if picked(i) {
                    p.grad.scale_in_place(scale);
                }
            }
        }
        norm
    }
}
