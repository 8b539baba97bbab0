//! Lifecycle of task prompt sets and the shared POP set, plus the five
//! feature-fusion operators that turn encoder outputs into a classifier
//! feature.
//!
//! Prompt parameters live in the shared [`ParamStore`] under the names
//! `prompt/pop` and `prompt/task/{i}` (1-based). At any point exactly the
//! current task's prompts and the POP set are trainable; every earlier
//! task's prompts are frozen and must stay bit-identical for the rest of
//! the run. The POP set is created once, at the first task, and is
//! warm-started across task boundaries — never re-initialized.
//!
//! Four fusion methods operate on a single encoder output. The fifth,
//! `FfCat`, is defined over per-task re-encodes (one forward pass per
//! task, each with only that task's prompts injected) and has its own
//! entry point, [`PromptStore::fuse_ffcat`].

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PopError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::vit::{EncodeRefs, PromptMode, PromptSeg};

/// Initialization scale for freshly allocated prompt rows.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// How prompt-slot encoder outputs are combined into the final feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum FusionMethod {
    /// Concatenate per-task features from t independent encodes, each
    /// with only that task's prompts present. No POP segment. Dim t·d.
    FfCat,
    /// Flat mean over every prompt-output token (task rows and POP rows
    /// alike, token-count weighted). Dim d.
    MeanOfAll,
    /// Coordinate-wise maximum over {f_1, …, f_t, f_c}. Dim d.
    MaxPooling,
    /// The POP feature alone: f = f_c. Dim d.
    PopTokenOnly,
    /// f_1 ⊕ … ⊕ f_t ⊕ f_c. Dim (t+1)·d. The default.
    #[default]
    MeanAndCat,
}


impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionMethod::FfCat => "ff-cat",
            FusionMethod::MeanOfAll => "mean-of-all",
            FusionMethod::MaxPooling => "max-pool",
            FusionMethod::PopTokenOnly => "pop-only",
            FusionMethod::MeanAndCat => "mean-and-cat",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionMethod {
    type Err = PopError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ff-cat" => Ok(FusionMethod::FfCat),
            "mean-of-all" => Ok(FusionMethod::MeanOfAll),
            "max-pool" => Ok(FusionMethod::MaxPooling),
            "pop-only" => Ok(FusionMethod::PopTokenOnly),
            "mean-and-cat" => Ok(FusionMethod::MeanAndCat),
            other => Err(PopError::invalid(format!(
                "unknown fusion method `{other}` (expected ff-cat, mean-of-all, \
                 max-pool, pop-only, or mean-and-cat)"
            ))),
        }
    }
}

/// Name of the POP parameter in the shared store.
pub const POP_NAME: &str = "prompt/pop";

/// Name of task i's prompt parameter.
pub fn task_prompt_name(i: usize) -> String {
    format!("prompt/task/{i}")
}

/// Manages prompt parameters across a sequence of tasks: allocation,
/// the freeze schedule, and the encode-time injection layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptStore {
    mode: PromptMode,
    /// Prompt rows per task set. Zero disables task prompts entirely
    /// (POP-only operation).
    rows_per_task: usize,
    /// Prompt rows in the POP set.
    pop_rows: usize,
    /// Transformer depth, for per-block prompt shapes in deep mode.
    depth: usize,
    /// Embedding dimension.
    dim: usize,
    /// Number of tasks begun so far.
    tasks: usize,
}

impl PromptStore {
    pub fn new(
        mode: PromptMode,
        rows_per_task: usize,
        pop_rows: usize,
        depth: usize,
        dim: usize,
    ) -> Result<Self> {
        if pop_rows == 0 {
            return Err(PopError::invalid("POP set needs at least one prompt row"));
        }
        if depth == 0 || dim == 0 {
            return Err(PopError::invalid(
                "prompt store needs nonzero depth and embedding dimension",
            ));
        }
        Ok(PromptStore {
            mode,
            rows_per_task,
            pop_rows,
            depth,
            dim,
            tasks: 0,
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn rows_per_task(&self) -> usize {
        self.rows_per_task
    }

    pub fn pop_rows(&self) -> usize {
        self.pop_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of tasks begun so far.
    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn prompt_shape(&self, rows: usize) -> Vec<usize> {
        match self.mode {
            PromptMode::Spt => vec![rows, self.dim],
            PromptMode::Dpt => vec![self.depth, rows, self.dim],
        }
    }

    fn alloc<T: Scalar>(&self, rows: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::trunc_normal(self.prompt_shape(rows), PROMPT_INIT_STD, rng)
    }

    /// Open task `t` (1-based): allocate its prompt set, freeze every
    /// earlier task's set, and — at the first task only — allocate the
    /// POP set. The POP parameters persist across calls; they are never
    /// re-initialized.
    pub fn begin_task<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if t != self.tasks + 1 {
            return Err(PopError::protocol(format!(
                "cannot begin task {t}: {} tasks begun so far (tasks open in order, \
                 each exactly once)",
                self.tasks
            )));
        }
        if t == 1 {
            let pop = self.alloc::<T>(self.pop_rows, rng).trainable();
            store.insert(POP_NAME, pop)?;
        }
        if self.rows_per_task > 0 {
            for i in 1..t {
                store.set_trainable(&task_prompt_name(i), false)?;
            }
            let p = self.alloc::<T>(self.rows_per_task, rng).trainable();
            store.insert(&task_prompt_name(t), p)?;
        }
        self.tasks = t;
        Ok(())
    }

    /// Reconcile lifecycle state with a store loaded from a checkpoint:
    /// marks POP and the current task's prompts trainable, all earlier
    /// tasks frozen.
    pub fn restore_trainability<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tasks == 0 {
            return Ok(());
        }
        store.set_trainable(POP_NAME, true)?;
        for i in 1..=self.tasks {
            if self.rows_per_task > 0 {
                store.set_trainable(&task_prompt_name(i), i == self.tasks)?;
            }
        }
        Ok(())
    }

    /// Injection layout for the encoder: POP first, then task prompts in
    /// task order. Row counts are per-block in deep mode.
    pub fn segs_for_encode(&self) -> Vec<PromptSeg> {
        let mut segs = Vec::with_capacity(1 + self.tasks);
        segs.push(PromptSeg {
            name: POP_NAME.to_string(),
            rows: self.pop_rows,
        });
        if self.rows_per_task > 0 {
            for i in 1..=self.tasks {
                segs.push(PromptSeg {
                    name: task_prompt_name(i),
                    rows: self.rows_per_task,
                });
            }
        }
        segs
    }

    /// Injection layout with only task `i`'s prompts (no POP) — the
    /// per-task re-encode used by [`FusionMethod::FfCat`].
    pub fn segs_for_task_only(&self, i: usize) -> Result<Vec<PromptSeg>> {
        self.check_task_index(i)?;
        Ok(vec![PromptSeg {
            name: task_prompt_name(i),
            rows: self.rows_per_task,
        }])
    }

    fn check_task_index(&self, i: usize) -> Result<()> {
        if self.rows_per_task == 0 {
            return Err(PopError::invalid(
                "task prompts are disabled (zero rows per task)",
            ));
        }
        if i == 0 || i > self.tasks {
            return Err(PopError::invalid(format!(
                "task index {i} out of range (1..={} tasks begun)",
                self.tasks
            )));
        }
        Ok(())
    }

    fn segment_node(out: &EncodeRefs, name: &str) -> Result<(NodeId, usize)> {
        out.segments
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, node, rows)| (node, rows))
            .ok_or_else(|| {
                PopError::invalid(format!("encoder output has no `{name}` segment"))
            })
    }

    /// f_i: mean over the encoder outputs at task i's prompt slots.
    /// Shape batch×d.
    pub fn task_feature<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        out: &EncodeRefs,
        i: usize,
    ) -> Result<NodeId> {
        self.check_task_index(i)?;
        let (node, rows) = Self::segment_node(out, &task_prompt_name(i))?;
        tape.mean_seg_rows(node, out.batch, rows)
    }

    /// f_c: mean over the encoder outputs at the POP slots. Shape batch×d.
    pub fn cross_feature<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        out: &EncodeRefs,
    ) -> Result<NodeId> {
        let (node, rows) = Self::segment_node(out, POP_NAME)?;
        tape.mean_seg_rows(node, out.batch, rows)
    }

    /// Output width of `fuse` for a given method at task count `t`.
    pub fn fused_dim(&self, method: FusionMethod, t: usize) -> usize {
        match method {
            FusionMethod::MeanAndCat => (t + 1) * self.dim,
            FusionMethod::FfCat => t * self.dim,
            _ => self.dim,
        }
    }

    /// Combine one encoder output into the classifier feature.
    ///
    /// `t` is the number of tasks the output must cover (its injection
    /// layout must hold segments for tasks 1..=t plus POP). `FfCat` is
    /// defined over per-task re-encodes and is rejected here — see
    /// [`fuse_ffcat`](Self::fuse_ffcat).
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        out: &EncodeRefs,
        method: FusionMethod,
        t: usize,
    ) -> Result<NodeId> {
        if t == 0 || t > self.tasks {
            return Err(PopError::invalid(format!(
                "fuse over {t} tasks but {} begun",
                self.tasks
            )));
        }
        match method {
            FusionMethod::MeanAndCat => {
                let mut parts = Vec::with_capacity(t + 1);
                for i in 1..=t {
                    parts.push(self.task_feature(tape, out, i)?);
                }
                parts.push(self.cross_feature(tape, out)?);
                tape.concat_cols(&parts)
            }
            FusionMethod::PopTokenOnly => self.cross_feature(tape, out),
            FusionMethod::MeanOfAll => {
                // flat token-count-weighted mean over every prompt output
                let mut nodes = Vec::with_capacity(1 + t);
                let mut total_rows = 0;
                let (pop_node, pop_rows) = Self::segment_node(out, POP_NAME)?;
                nodes.push(pop_node);
                total_rows += pop_rows;
                for i in 1..=t {
                    self.check_task_index(i)?;
                    let (node, rows) = Self::segment_node(out, &task_prompt_name(i))?;
                    nodes.push(node);
                    total_rows += rows;
                }
                let stacked = tape.concat_rows(&nodes, out.batch)?;
                tape.mean_seg_rows(stacked, out.batch, total_rows)
            }
            FusionMethod::MaxPooling => {
                let mut acc = self.task_feature(tape, out, 1)?;
                for i in 2..=t {
                    let fi = self.task_feature(tape, out, i)?;
                    acc = tape.max_elem(acc, fi)?;
                }
                let fc = self.cross_feature(tape, out)?;
                tape.max_elem(acc, fc)
            }
            FusionMethod::FfCat => Err(PopError::invalid(
                "ff-cat fuses one encode per task; encode with segs_for_task_only \
                 and call fuse_ffcat",
            )),
        }
    }

    /// FfCat fusion: `outs[i]` must be the encode of the same batch with
    /// only task i+1's prompts injected; the per-task features are
    /// concatenated to a t·d feature. The POP set plays no part.
    pub fn fuse_ffcat<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        outs: &[EncodeRefs],
        t: usize,
    ) -> Result<NodeId> {
        if t == 0 || t > self.tasks {
            return Err(PopError::invalid(format!(
                "fuse over {t} tasks but {} begun",
                self.tasks
            )));
        }
        if outs.len() != t {
            return Err(PopError::invalid(format!(
                "ff-cat over {t} tasks needs {t} encodes, got {}",
                outs.len()
            )));
        }
        let mut parts = Vec::with_capacity(t);
        for (idx, out) in outs.iter().enumerate() {
            parts.push(self.task_feature(tape, out, idx + 1)?);
        }
        tape.concat_cols(&parts)
    }

    /// Total trainable prompt elements in the store. By the freeze
    /// schedule this is (rows_per_task + pop_rows)·d (times depth in
    /// deep mode) at every task — independent of how many tasks have run.
    pub fn trainable_elements<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store
            .trainable_names()
            .into_iter()
            .filter(|n| n.starts_with("prompt/"))
            .map(|n| store.get(&n).map(|t| t.numel()).unwrap_or(0))
            .sum()
    }
}
