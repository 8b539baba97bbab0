//! Named parameter arena shared by the backbone, prompt sets, and heads.
//!
//! Parameters live here between steps; a training step binds the ones it
//! needs onto a fresh tape as leaves, runs backward, then harvests leaf
//! gradients back into the store for the optimizer. Freezing is a per-
//! parameter flag: frozen parameters still bind (the forward pass needs
//! their values) but never receive gradients or optimizer updates.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{PopError, Result};
use crate::scalar::Scalar;
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Default, Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(PopError::invalid(format!(
                "parameter {name:?} already registered"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| PopError::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(PopError::invalid(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn remove(&mut self, name: &str) -> Result<Tensor<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| PopError::invalid(format!("unknown parameter {name:?}")))?;
        self.index.remove(name);
        let (_, tensor) = self.entries.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Ok(tensor)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.requires_grad = trainable;
        Ok(())
    }

    /// Flip the flag on every parameter whose name starts with `prefix`.
    /// Returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, tensor) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                tensor.requires_grad = trainable;
                n += 1;
            }
        }
        n
    }

    /// Names in sorted order (canonical order for checkpoints and digests).
    pub fn sorted_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad = None;
        }
    }

    /// Hex sha-256 over one parameter's little-endian bytes. Used by the
    /// freeze audits: a frozen parameter's digest must not move.
    pub fn digest(&self, name: &str) -> Result<String> {
        let t = self.get(name)?;
        let mut h = Sha256::new();
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.byte_len());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
        Ok(hex(&h.finalize()))
    }

    /// Digest over all parameters matching `prefix`, folded in sorted-name
    /// order with names included, so renames and data edits both show.
    pub fn digest_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for name in self.sorted_names() {
            if !name.starts_with(prefix) {
                continue;
            }
            let t = self.get(&name).expect("name from listing");
            h.update(name.as_bytes());
            h.update([0u8]);
            let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.byte_len());
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Map from tape leaves back to store parameters for one step.
#[derive(Debug, Default)]
pub struct StepBindings {
    entries: Vec<(String, NodeId, usize, usize)>,
}

impl StepBindings {
    pub fn new() -> Self {
        StepBindings {
            entries: Vec::new(),
        }
    }

    /// Bind a whole parameter as a tape leaf.
    pub fn bind<T: Scalar>(
        &mut self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        name: &str,
    ) -> Result<NodeId> {
        let t = store.get(name)?;
        let node = tape.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)?;
        self.entries
            .push((name.to_string(), node, 0, t.numel()));
        Ok(node)
    }

    /// Bind a contiguous slice of a parameter (block-wise prompt layouts
    /// store one 3-d parameter and bind one 2-d leaf per block).
    pub fn bind_slice<T: Scalar>(
        &mut self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        name: &str,
        offset: usize,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let t = store.get(name)?;
        let len: usize = shape.iter().product();
        if offset + len > t.numel() {
            return Err(PopError::invalid(format!(
                "slice {offset}..{} of parameter {name:?} with {} elements",
                offset + len,
                t.numel()
            )));
        }
        let node = tape.leaf(
            shape,
            t.data()[offset..offset + len].to_vec(),
            t.requires_grad,
        )?;
        self.entries.push((name.to_string(), node, offset, len));
        Ok(node)
    }

    /// Accumulate tape gradients back into parameter `grad` buffers.
    pub fn harvest<T: Scalar>(&self, store: &mut ParamStore<T>, tape: &Tape<T>) -> Result<()> {
        for (name, node, offset, len) in &self.entries {
            let Some(g) = tape.grad(*node) else {
                continue;
            };
            let t = store.get_mut(name)?;
            if !t.requires_grad {
                continue;
            }
            let numel = t.numel();
            let buf = t.grad.get_or_insert_with(|| vec![T::zero(); numel]);
            for (dst, &src) in buf[*offset..offset + len].iter_mut().zip(g) {
                *dst = *dst + src;
            }
        }
        Ok(())
    }
}

/// Adam over every trainable parameter, with one moment state per name.
/// A fresh optimizer is created for each training stage, so stale moments
/// never leak across tasks or into the tuning phase.
#[derive(Debug)]
pub struct Optimizer<T> {
    cfg: AdamConfig,
    states: HashMap<String, AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Optimizer {
            states: HashMap::new(),
            cfg,
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
        for s in self.states.values_mut() {
            s.set_lr(lr);
        }
    }

    /// Apply one update to every trainable parameter holding a gradient,
    /// then clear all gradients. Returns the number of parameters updated.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<usize> {
        let mut updated = 0;
        // Sorted order: iteration must not depend on HashMap layout.
        for name in store.trainable_names() {
            let t = store.get_mut(&name)?;
            let Some(grad) = t.grad.take() else {
                continue;
            };
            let numel = t.numel();
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(self.cfg, numel));
            state.step(t.data_mut(), &grad)?;
            updated += 1;
        }
        store.zero_grads();
        Ok(updated)
    }
}
