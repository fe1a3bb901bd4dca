//! Tensors, the named parameter store, and slot-aligned gradient buckets.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::NnError;

pub type ArrD = ArrayD<f64>;
/// Cheaply clonable copy-on-write array; graphs hold leaves through this so
/// binding a parameter never copies its data.
pub type SharedArrD = ndarray::ArcArray<f64, IxDyn>;

/// A dense value with an optional gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    data: SharedArrD,
    grad: Option<ArrD>,
}

impl Tensor {
    pub fn new(data: ArrD) -> Self {
        Tensor {
            data: data.into_shared(),
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Gaussian init, Box-Muller so only `rand`'s uniform source is needed.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| sample_normal(rng) * std).collect();
        Tensor::new(ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape/product mismatch"))
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn data(&self) -> &SharedArrD {
        &self.data
    }

    /// Mutable access; copies only if a graph still shares the buffer.
    pub fn data_mut(&mut self) -> &mut SharedArrD {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&ArrD> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, g: Option<ArrD>) {
        if let Some(ref a) = g {
            debug_assert_eq!(a.shape(), self.data.shape());
        }
        self.grad = g;
    }
}

pub fn sample_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Ordered collection of named parameters. Order is the checkpoint layout
/// order and the slot index used by [`Gradients`] and Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter and returns its slot. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let slot = self.entries.len();
        self.index.insert(name.clone(), slot);
        self.entries.push((name, t));
        slot
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.slot(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Per-slot gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<ArrD>>,
}

impl Gradients {
    pub fn new(n_slots: usize) -> Self {
        Gradients {
            slots: vec![None; n_slots],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&ArrD> {
        self.slots[slot].as_ref()
    }

    pub fn set(&mut self, slot: usize, g: ArrD) {
        self.slots[slot] = Some(g);
    }

    pub fn accumulate_slot(&mut self, slot: usize, g: &ArrD) {
        match &mut self.slots[slot] {
            Some(acc) => *acc += g,
            None => self.slots[slot] = Some(g.clone()),
        }
    }

    /// Element-wise sum with another bucket of the same arity.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), NnError> {
        if self.slots.len() != other.slots.len() {
            return Err(NnError::shape(
                "gradients.accumulate",
                format!("{} slots vs {}", self.slots.len(), other.slots.len()),
            ));
        }
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_slot(slot, g);
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Option<&ArrD>)> {
        self.slots.iter().enumerate().map(|(i, g)| (i, g.as_ref()))
    }
}
