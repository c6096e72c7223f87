use super::{Scalar, Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Append a tensor and return its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replace all tensors with same-named, same-shaped ones from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        ensure!(
            self.names == other.names,
            config,
            "parameter names differ ({} vs {} tensors)",
            self.names.len(),
            other.names.len()
        );
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            ensure!(
                a.shape() == b.shape(),
                config,
                "parameter {} has shape {:?}, checkpoint has {:?}",
                name,
                a.shape(),
                b.shape()
            );
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}
