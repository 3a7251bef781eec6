use std::ops::Index;

use sha2::{Digest, Sha256};

use super::checkpoint::{self, Checkpoint};
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{MarioError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered parameter set of one trainable component.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> ParamId {
        tensor.requires_grad = trainable;
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.uniform_range(-bound, bound) as f32)
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product matches");
        self.add(name, t, true)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product matches");
        self.add(name, t, true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), vec![value; n]).expect("shape product matches");
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].tensor.requires_grad
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].tensor.requires_grad = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.tensor.requires_grad = false;
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Copies every parameter onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let (r, c) = e.tensor.matrix_dims();
                tape.leaf(r, c, e.tensor.to_f64(), e.tensor.requires_grad)
                    .expect("tensor dims are consistent")
            })
            .collect();
        Bound { vars }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.tensor.clone()))
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint; names and shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.entries.len() != self.entries.len() {
            return Err(MarioError::Checkpoint(format!(
                "expected {} entries, found {}",
                self.entries.len(),
                ckpt.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter_mut().zip(&ckpt.entries) {
            if &e.name != name || e.tensor.shape() != t.shape() {
                return Err(MarioError::Checkpoint(format!(
                    "entry {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.tensor.shape()
                )));
            }
            let trainable = e.tensor.requires_grad;
            e.tensor = t.clone();
            e.tensor.requires_grad = trainable;
        }
        Ok(())
    }

    /// SHA-256 over the serialized checkpoint bytes, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = checkpoint::encode(&self.to_checkpoint());
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradients after `tape.backward`. Trainable parameters the loss never
    /// touched get zeros; frozen ones get `None`.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Gradients {
        let grads = self
            .vars
            .iter()
            .zip(store.entries())
            .map(|(&v, e)| {
                if !e.tensor.requires_grad {
                    return None;
                }
                Some(
                    tape.grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; e.tensor.len()]),
                )
            })
            .collect();
        Gradients { grads }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store
                .entries()
                .iter()
                .map(|e| e.tensor.requires_grad.then(|| vec![0.0; e.tensor.len()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n.is_finite() && n > max_norm {
            self.scale(max_norm / n);
        }
    }
}
