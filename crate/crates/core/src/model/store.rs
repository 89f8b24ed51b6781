use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::Component;
use crate::nn::{ParamId, Parameter, Tensor};

/// Insertion-ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::Invalid(format!(
                "duplicate parameter name {:?}",
                param.name
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, component: Component, value: Tensor) -> Result<ParamId> {
        self.insert(Parameter::new(name, component, value))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|id| &self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn component(&self, component: Component) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(move |p| p.component == component)
    }

    pub fn component_mut(&mut self, component: Component) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut().filter(move |p| p.component == component)
    }

    /// Number of scalars tagged `component`.
    pub fn count_params(&self, component: Component) -> usize {
        self.component(component).map(Parameter::len).sum()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Parameter::len)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Copies values (not flags or gradients) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParameterStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "stores hold {} and {} tensors",
                self.params.len(),
                other.params.len()
            )));
        }
        for p in &self.params {
            let q = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Shape(format!("tensor {:?} missing", p.name)))?;
            if q.value.shape() != p.value.shape() || q.component != p.component {
                return Err(Error::Shape(format!(
                    "tensor {:?}: {:?}/{} vs {:?}/{}",
                    p.name,
                    p.value.shape(),
                    p.component,
                    q.value.shape(),
                    q.component
                )));
            }
        }
        Ok(())
    }

    /// True when every value tensor is bit-identical to `other`'s.
    pub fn values_bits_eq(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bits_eq(&b.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut s = ParameterStore::new();
        s.add("w", Component::Encoder, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Component::Decoder, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn counts_by_component() {
        let mut s = ParameterStore::new();
        s.add("a", Component::Encoder, Tensor::zeros(&[2, 3])).unwrap();
        s.add("b", Component::Encoder, Tensor::zeros(&[4])).unwrap();
        s.add("c", Component::Softmax, Tensor::zeros(&[5])).unwrap();
        assert_eq!(s.count_params(Component::Encoder), 10);
        assert_eq!(s.count_params(Component::Softmax), 5);
        assert_eq!(s.count_params(Component::Decoder), 0);
        assert_eq!(s.total_params(), 15);
    }
}
