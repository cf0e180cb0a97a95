use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform(−b, b) initialisation with `b = gain · sqrt(3 / fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> ParamId {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 };
        }
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Copies every tensor whose name exists in `other` with the same shape.
    pub fn copy_matching_from(&mut self, other: &ParamSet) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.by_name(name) {
                if src.shape == self.tensors[i].shape {
                    self.tensors[i].data.copy_from_slice(&src.data);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces the tensor stored under `name`; the shape must match.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::Shape(format!("parameter {name}: expected {} values, got {}", t.numel(), data.len())));
        }
        t.data.copy_from_slice(data);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers laid out like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}
