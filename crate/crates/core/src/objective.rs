//! The three-part training objective and its growing linear heads.
//!
//! Three classifiers ride on the fused features: φ_aux (one fresh head
//! per task, d → |Y_t|+1, where output 0 means "not from the current
//! task"), φ_task (feature → task id), and φ_class (feature → cumulative
//! class). The total loss is
//!
//!   L = L_class + λ_task·L_task + λ_aux·L_aux
//!
//! with all λ defaulting to 1. Head parameters live in the shared store
//! under `head/aux/{t}/…`, `head/task/…`, and `head/class/…`; at each
//! task boundary the task and class heads are rebuilt with larger
//! dimensions, copying surviving (input-slot, output) entries bit for
//! bit and zero-filling the new ones so that old-class logits are
//! preserved exactly until training moves them.

use serde::{Deserialize, Serialize};

use crate::error::{PopError, Result};
use crate::param::{ParamStore, StepBindings};
use crate::prompts::FusionMethod;
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape, Tensor};

/// Mixing weights for the task-id and auxiliary terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_task: f64,
    pub lambda_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_task: 1.0,
            lambda_aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_task < 0.0 || self.lambda_aux < 0.0 {
            return Err(PopError::invalid(format!(
                "loss weights must be nonnegative (got λ_task={}, λ_aux={})",
                self.lambda_task, self.lambda_aux
            )));
        }
        Ok(())
    }
}

/// Auxiliary target remap: a sample from an earlier task collapses to
/// class 0 ("none of the current task's classes"); a current-task sample
/// keeps its within-task label shifted up by one.
pub fn aux_target(y_local: usize, k: usize, t: usize) -> Result<usize> {
    if k == 0 || k > t {
        return Err(PopError::invalid(format!(
            "sample task id {k} outside 1..={t}"
        )));
    }
    Ok(if k < t { 0 } else { y_local + 1 })
}

fn aux_w(t: usize) -> String {
    format!("head/aux/{t}/w")
}

fn aux_b(t: usize) -> String {
    format!("head/aux/{t}/b")
}

const TASK_W: &str = "head/task/w";
const TASK_B: &str = "head/task/b";
const CLASS_W: &str = "head/class/w";
const CLASS_B: &str = "head/class/b";

/// The classifier heads for one continual run. Dimensions grow with the
/// task count; the fusion method fixes how the feature width scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSet {
    dim: usize,
    fusion: FusionMethod,
    /// |Y_i| per task, index 0 = task 1.
    task_classes: Vec<usize>,
}

impl HeadSet {
    pub fn new(dim: usize, fusion: FusionMethod) -> Self {
        HeadSet {
            dim,
            fusion,
            task_classes: Vec::new(),
        }
    }

    /// Number of tasks the heads currently cover.
    pub fn tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn fusion(&self) -> FusionMethod {
        self.fusion
    }

    /// Total classes across all covered tasks.
    pub fn cumulative_classes(&self) -> usize {
        self.task_classes.iter().sum()
    }

    pub fn task_class_count(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.tasks() {
            return Err(PopError::invalid(format!(
                "task index {i} out of range (1..={})",
                self.tasks()
            )));
        }
        Ok(self.task_classes[i - 1])
    }

    /// Width of the fused feature the task and class heads accept at
    /// task count `t`.
    pub fn input_dim(&self, t: usize) -> usize {
        match self.fusion {
            FusionMethod::MeanAndCat => (t + 1) * self.dim,
            FusionMethod::FfCat => t * self.dim,
            _ => self.dim,
        }
    }

    /// Map an input row index of the task-`t-1` heads to its slot in the
    /// task-`t` heads. Only the cat layouts move: the trailing POP slot
    /// shifts right to make room for the new task's feature block.
    fn remap_row(&self, r: usize, old_t: usize) -> usize {
        match self.fusion {
            FusionMethod::MeanAndCat if r >= old_t * self.dim => r + self.dim,
            _ => r,
        }
    }

    /// Grow the heads for task `new_t` with `new_task_classes` fresh
    /// classes: a brand-new φ_aux; φ_task and φ_class rebuilt at the
    /// larger size with surviving entries copied and new ones zeroed.
    pub fn expand<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        new_task_classes: usize,
        new_t: usize,
    ) -> Result<()> {
        if new_t != self.tasks() + 1 {
            return Err(PopError::protocol(format!(
                "cannot expand heads for task {new_t}: currently covering {} tasks \
                 (expand exactly once per task, in order)",
                self.tasks()
            )));
        }
        if new_task_classes == 0 {
            return Err(PopError::invalid("a task needs at least one class"));
        }
        let old_t = self.tasks();
        let old_in = self.input_dim(old_t);
        let old_classes = self.cumulative_classes();
        self.task_classes.push(new_task_classes);
        let new_in = self.input_dim(new_t);
        let new_classes = self.cumulative_classes();

        // fresh auxiliary head; earlier ones survive frozen
        if old_t > 0 {
            store.set_trainable(&aux_w(old_t), false)?;
            store.set_trainable(&aux_b(old_t), false)?;
        }
        store.insert(
            &aux_w(new_t),
            Tensor::zeros(vec![self.dim, new_task_classes + 1]).trainable(),
        )?;
        store.insert(
            &aux_b(new_t),
            Tensor::zeros(vec![new_task_classes + 1]).trainable(),
        )?;

        let rebuild = |store: &mut ParamStore<T>,
                       w_name: &str,
                       b_name: &str,
                       old_out: usize,
                       new_out: usize|
         -> Result<()> {
            let mut w = vec![T::zero(); new_in * new_out];
            let mut b = vec![T::zero(); new_out];
            if old_t > 0 {
                let old_w = store.remove(w_name)?;
                let old_b = store.remove(b_name)?;
                for r in 0..old_in {
                    let nr = self.remap_row(r, old_t);
                    for c in 0..old_out {
                        w[nr * new_out + c] = old_w.data()[r * old_out + c];
                    }
                }
                b[..old_out].copy_from_slice(&old_b.data()[..old_out]);
            }
            store.insert(w_name, Tensor::new(vec![new_in, new_out], w)?.trainable())?;
            store.insert(b_name, Tensor::new(vec![new_out], b)?.trainable())?;
            Ok(())
        };
        rebuild(store, TASK_W, TASK_B, old_t, new_t)?;
        rebuild(store, CLASS_W, CLASS_B, old_classes, new_classes)?;
        Ok(())
    }

    /// Reassert the freeze schedule on a store loaded from a checkpoint:
    /// current-task aux head and both shared heads trainable, earlier aux
    /// heads frozen.
    pub fn restore_trainability<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let t = self.tasks();
        if t == 0 {
            return Ok(());
        }
        for i in 1..=t {
            store.set_trainable(&aux_w(i), i == t)?;
            store.set_trainable(&aux_b(i), i == t)?;
        }
        for name in [TASK_W, TASK_B, CLASS_W, CLASS_B] {
            store.set_trainable(name, true)?;
        }
        Ok(())
    }

    fn linear<T: Scalar>(
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        x: NodeId,
        w_name: &str,
        b_name: &str,
    ) -> Result<NodeId> {
        let w = binds.bind(store, tape, w_name)?;
        let b = binds.bind(store, tape, b_name)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Class-head logits over a fused feature — the inference path.
    pub fn class_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        f: NodeId,
    ) -> Result<NodeId> {
        Self::linear(store, tape, binds, f, CLASS_W, CLASS_B)
    }

    /// Auxiliary loss: cross-entropy of the current task's φ_aux on the
    /// task feature f_t, against remapped targets.
    pub fn aux_loss<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        f_t: NodeId,
        targets: &[usize],
    ) -> Result<NodeId> {
        let t = self.tasks();
        if t == 0 {
            return Err(PopError::protocol("no task begun: no auxiliary head"));
        }
        let classes = self.task_classes[t - 1];
        for &y in targets {
            if y > classes {
                return Err(PopError::invalid(format!(
                    "auxiliary target {y} outside 0..={classes}"
                )));
            }
        }
        let logits = Self::linear(store, tape, binds, f_t, &aux_w(t), &aux_b(t))?;
        tape.cross_entropy(logits, targets)
    }

    /// Task-id and class cross-entropies over the fused feature.
    /// `task_ids` are 1-based sample task ids; `class_idx` are cumulative
    /// class indices (0-based over the union of all task label sets).
    pub fn cil_losses<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        f: NodeId,
        task_ids: &[usize],
        class_idx: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let t = self.tasks();
        if t == 0 {
            return Err(PopError::protocol("no task begun: heads are empty"));
        }
        if task_ids.len() != class_idx.len() {
            return Err(PopError::invalid(format!(
                "{} task ids vs {} class labels",
                task_ids.len(),
                class_idx.len()
            )));
        }
        let classes = self.cumulative_classes();
        for &k in task_ids {
            if k == 0 || k > t {
                return Err(PopError::invalid(format!(
                    "sample task id {k} outside 1..={t}"
                )));
            }
        }
        for &y in class_idx {
            if y >= classes {
                return Err(PopError::invalid(format!(
                    "class index {y} outside 0..{classes}"
                )));
            }
        }
        let task_targets: Vec<usize> = task_ids.iter().map(|&k| k - 1).collect();
        let task_logits = Self::linear(store, tape, binds, f, TASK_W, TASK_B)?;
        let l_task = tape.cross_entropy(task_logits, &task_targets)?;
        let class_logits = Self::linear(store, tape, binds, f, CLASS_W, CLASS_B)?;
        let l_class = tape.cross_entropy(class_logits, class_idx)?;
        Ok((l_task, l_class))
    }
}

/// The weighted sum L_class + λ_task·L_task + λ_aux·L_aux as a tape node.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_class: NodeId,
    l_task: NodeId,
    l_aux: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    let st = tape.scale(l_task, T::from_f64(w.lambda_task));
    let sa = tape.scale(l_aux, T::from_f64(w.lambda_aux));
    let partial = tape.add(l_class, st)?;
    tape.add(partial, sa)
}
