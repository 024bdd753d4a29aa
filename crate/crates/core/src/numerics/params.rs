use crate::error::{Error, Result};

use super::{Graph, Scalar, Tensor, Var};

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` selects it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        self.decay.push(decay);
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

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            let n = t.len();
            match t.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
                None => t.grad = Some(vec![T::zero(); n]),
            }
        }
    }

    /// Places every parameter on the tape. With `trainable = false` the
    /// leaves are constants and no gradient is recorded.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                g.leaf(t.shape().to_vec(), t.data().to_vec(), trainable)
                    .expect("param tensor invariant")
            })
            .collect()
    }

    /// Adds the tape gradients of bound leaves into the parameter buffers.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Flattened gradient of all parameters.
    pub fn flat_grad(&self) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let g = t
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>().with_grad()).collect(),
            decay: self.decay.clone(),
        }
    }

    /// Global L2 norm of the gradients; rescales them to `max_norm` if larger.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = T::cast_from(max_norm / norm);
            for t in &mut self.tensors {
                if let Some(g) = t.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        norm
    }
}
