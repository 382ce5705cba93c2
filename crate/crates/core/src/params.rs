//! Named parameter storage shared by models, optimizers and checkpoints.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a trainable tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        t.requires_grad = true;
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's value (the shape may change).
    pub fn replace(&mut self, id: ParamId, mut t: Tensor<T>) {
        t.requires_grad = true;
        self.tensors[id.0] = t;
    }

    /// Adds the gradients recorded in `graph` to each parameter's `grad`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (pid, node) in graph.params() {
            let Some(g) = graph.grad_slice(node) else { continue };
            let t = &mut self.tensors[pid.0];
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a = *a + v),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Multiplies every accumulated gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        let c = T::from_f64(c);
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v = *v * c);
            }
        }
    }

    /// Euclidean norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// CRC32 over every parameter's name and raw bytes, in order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize()
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        let unknown: Vec<&str> = other
            .iter()
            .filter(|(n, _)| self.find(n).is_none())
            .map(|(n, _)| n.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Corrupt(format!("unknown tensors: {}", unknown.join(", "))));
        }
        let missing: Vec<&str> = self
            .names
            .iter()
            .filter(|n| !other.iter().any(|(o, _)| o == *n))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Corrupt(format!("missing tensors: {}", missing.join(", "))));
        }
        for (name, t) in other {
            let id = self.find(name).expect("checked above");
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.replace(id, t.clone());
        }
        Ok(())
    }
}
