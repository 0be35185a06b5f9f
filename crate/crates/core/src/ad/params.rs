use indexmap::IndexMap;

use super::{AdError, Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) struct Param {
    pub(crate) value: Tensor,
    pub(crate) grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

/// Named parameters with gradient accumulators and AdamW moments.
///
/// Insertion order is preserved and defines the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, AdError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AdError::DuplicateParam(name));
        }
        let zeros = Tensor::zeros(value.shape());
        let (idx, _) = self.params.insert_full(
            name,
            Param {
                grad: zeros.clone(),
                m: zeros.clone(),
                v: zeros,
                value,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AdError> {
        self.params
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter adjoints of one backward sweep into the
    /// accumulators. Merging several tapes is plain summation.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in self.params.values_mut() {
            for g in p.grad.data_mut() {
                *g *= c;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.values().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }
}
