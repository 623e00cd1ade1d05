//! Named parameter storage shared by every trainable component.
//!
//! Components hold [`ParamId`] handles into one [`ParamSet`]; gradients live in
//! a [`Grads`] with the identical layout. The optimizer, the checkpoint writer
//! and the finite-difference checker all work on the flat view.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data.iter_mut().for_each(|v| *v = 1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                t.data.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.clone());
        self.tensors.push(t);
        self.by_name.insert(name, id);
        id
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            slots: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    /// Replace the value of an existing tensor (shape must match).
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), String> {
        let id = self.id(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape != tensor.shape {
            return Err(format!(
                "shape mismatch for {name}: expected {:?}, got {:?}",
                slot.shape, tensor.shape
            ));
        }
        *slot = tensor;
        Ok(())
    }
}

/// Gradient buffers aligned slot-for-slot with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub slots: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.slots
            .iter_mut()
            .flat_map(|v| v.iter_mut())
            .for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flat_map(|s| s.iter()).all(|v| v.is_finite())
    }
}
