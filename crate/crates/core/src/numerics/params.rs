use std::collections::HashMap;

use super::Matrix;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub frozen: bool,
}

/// Named, insertion-ordered parameters with per-entry frozen flags and
/// gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Matrix::zeros(r, c),
            frozen,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn tunable(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn frozen(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn tunable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id)
    }

    pub fn tunable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Matrix) -> Result<()> {
        self.params[id.0].grad.add_assign(grad)
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.grad.as_slice().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.tunable("w", Matrix::zeros(1, 1)).unwrap();
        assert!(store.tunable("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn tunable_filter_skips_frozen() {
        let mut store = ParamStore::new();
        store.frozen("enc", Matrix::zeros(2, 2)).unwrap();
        let w = store.tunable("w", Matrix::zeros(1, 3)).unwrap();
        assert_eq!(store.tunable_ids().collect::<Vec<_>>(), vec![w]);
        assert_eq!(store.tunable_count(), 3);
    }
}
