use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Add or replace `name`; returns its slot.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> usize {
        if let Some(i) = self.index_of(name) {
            self.values[i] = value;
            return i;
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn value(&self, slot: usize) -> &Tensor<T> {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Record every parameter as a trainable leaf of `g`, in slot order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}
