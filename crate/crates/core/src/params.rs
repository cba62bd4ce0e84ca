//! Named, grouped parameter tensors.
//!
//! A *group* is the unit the gradient gate freezes: one encoder layer, one
//! decoder layer, the label attention, each scoring MLP, and so on. Every
//! parameter belongs to exactly one group.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, group: &str, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
        });
    }

    /// Uniform(-bound, bound) initialization.
    pub fn push_uniform<R: Rng + ?Sized>(&mut self, group: &str, name: &str, shape: &[usize], bound: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.push(group, name, Tensor::from_parts_unchecked(shape.to_vec(), data));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))?;
        self.params[i].value = value;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if out.last() != Some(&p.group) && !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    /// Parameter positions of each group, in [`ParamStore::groups`] order.
    pub fn group_members(&self) -> Vec<(String, Vec<usize>)> {
        self.groups()
            .into_iter()
            .map(|g| {
                let members = (0..self.params.len()).filter(|&i| self.params[i].group == g).collect();
                (g, members)
            })
            .collect()
    }

    /// Puts every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Wraps handles that were put on a tape elsewhere, in store order.
    pub fn rebind(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "one handle per parameter");
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    /// Gradients of every parameter after `tape.backward`, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_parameters() {
        let mut store = ParamStore::new();
        store.push("a", "a.w", Tensor::zeros(&[2]));
        store.push("b", "b.w", Tensor::zeros(&[2]));
        store.push("a", "a.b", Tensor::zeros(&[1]));
        let members = store.group_members();
        assert_eq!(members, vec![("a".into(), vec![0, 2]), ("b".into(), vec![1])]);
        let covered: usize = members.iter().map(|(_, m)| m.len()).sum();
        assert_eq!(covered, store.len());
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.push("a", "w", Tensor::zeros(&[1]));
        store.push("b", "w", Tensor::zeros(&[1]));
    }
}
