use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoseError};
use crate::tensor::Tensor;

/// Ordered map from group name to tensor.
///
/// Used for parameters and for everything shaped like them: gradients,
/// optimizer moments, and landscape directions. Iteration follows
/// declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    groups: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.groups.contains_key(&name) {
            return Err(RoseError::config(format!(
                "duplicate parameter group `{name}`"
            )));
        }
        self.groups.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.groups.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.groups.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.groups.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.groups.values()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Total scalar count `n`.
    pub fn scalar_count(&self) -> usize {
        self.groups.values().map(Tensor::len).sum()
    }

    /// True when both sets have the same names, order and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn ensure_same_structure(&self, other: &ParamSet, what: &'static str) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(RoseError::shape(what, "parameter group structure differs"))
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            groups: self.groups.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Elementwise combination of two structurally equal sets.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.ensure_same_structure(other, "zip_map")?;
        Ok(ParamSet {
            groups: self
                .groups
                .iter()
                .zip(other.groups.values())
                .map(|((k, a), b)| (k.clone(), a.zip_map(b, &f)))
                .collect(),
        })
    }

    /// All scalars concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.groups
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.groups
            .values()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.groups.values().all(Tensor::all_finite)
    }

    /// Name of the first group holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(k, _)| k.as_str())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            groups: iter.into_iter().collect(),
        }
    }
}
