use std::collections::BTreeMap;

use super::Matrix;
use crate::error::{MmqError, Result};

/// A model whose trainable state is a set of named matrices.
///
/// Names are stable across runs; optimizer state and checkpoints are keyed by
/// them.
pub trait ParamSet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, m| n += m.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Gradients keyed by parameter name.
///
/// A parameter with no entry is treated as frozen by the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Matrix>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeroed gradients for every parameter of `params`.
    pub fn zeros_like(params: &impl ParamSet) -> Self {
        let mut g = GradStore::new();
        params.visit_params(&mut |name, m| {
            g.grads
                .insert(name.to_string(), Matrix::zeros(m.rows(), m.cols()));
        });
        g
    }

    /// Accumulates `grad` into the entry `name`, creating it if needed.
    pub fn accumulate(&mut self, name: &str, grad: &Matrix) {
        match self.grads.get_mut(name) {
            Some(g) => g.add_assign(grad),
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
    }

    /// Accumulates another store, prefixing its names.
    pub fn merge_prefixed(&mut self, prefix: &str, other: GradStore) {
        for (name, g) in other.grads {
            let key = format!("{prefix}{name}");
            match self.grads.get_mut(&key) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.grads.insert(key, g);
                }
            }
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Matrix) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.grads.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.grads.remove(name)
    }

    /// Drops every entry whose name does not satisfy `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.grads.retain(|k, _| keep(k));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Checks that every entry names a parameter of matching shape.
    pub fn check_against(&self, params: &impl ParamSet) -> Result<()> {
        let mut shapes = BTreeMap::new();
        params.visit_params(&mut |name, m| {
            shapes.insert(name.to_string(), m.shape());
        });
        for (name, g) in &self.grads {
            match shapes.get(name) {
                None => return Err(MmqError::Missing(format!("parameter `{name}`"))),
                Some(&shape) if shape != g.shape() => {
                    return Err(MmqError::dim(
                        format!("gradient `{name}`"),
                        format!("{}x{}", shape.0, shape.1),
                        format!("{}x{}", g.rows(), g.cols()),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Named tensors with no further structure; handy for tests and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorMap {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn from_params(params: &impl ParamSet) -> Self {
        let mut tensors = Vec::new();
        params.visit_params(&mut |name, m| tensors.push((name.to_string(), m.clone())));
        TensorMap { tensors }
    }
}

impl ParamSet for TensorMap {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (n, m) in &self.tensors {
            f(n, m);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (n, m) in &mut self.tensors {
            f(n, m);
        }
    }
}
