//! Class-incremental protocol driver: task sequencing, the replay
//! buffer, the two-stage schedule (main training then class-balanced
//! tuning), k-shot and buffer-only variants, evaluation, and metrics.
//!
//! Every stage draws randomness from its own `(seed, tag)` stream, and
//! all training sets are kept in a canonical class-major order before
//! shuffling, so a run is a pure function of (config, seed): repeated
//! runs produce byte-identical metrics, and a buffer large enough to
//! hold everything makes buffer-only training literally identical to the
//! regular protocol.
//!
//! Protocol legality: past task data is never read directly — once task
//! t is finished, its samples survive only inside the buffer (training)
//! and its held-out test split (evaluation).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{split_tasks, Benchmark, LabeledImage};
use crate::error::{PopError, Result};
use crate::objective::{aux_target, total_loss, HeadSet, LossWeights};
use crate::param::{Optimizer, ParamStore, StepBindings};
use crate::prompts::{FusionMethod, PromptStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, NodeId, Tape};
use crate::vit::{argmax, lr_at_epoch, BackboneConfig, EncodeRefs, PromptMode, Vit};

// ── schedule ─────────────────────────────────────────────────────────

/// Epoch budget and learning-rate plan for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    /// Main-stage epochs over the current data plus buffer.
    pub epochs: usize,
    /// Epochs (0-based) at which the main-stage lr is multiplied by
    /// `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Class-balanced tuning epochs (skipped at the first task).
    pub tuning_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Schedule {
    /// The full-fidelity schedule: 170 main epochs with drops at 60,
    /// 100, and 120, then 20 tuning epochs, batch 64.
    pub fn full() -> Self {
        Schedule {
            epochs: 170,
            milestones: vec![60, 100, 120],
            lr_decay: 0.1,
            tuning_epochs: 20,
            batch: 64,
            lr: 5e-4,
            weight_decay: 1e-6,
        }
    }

    /// Proportionally shrunk schedule for single-core desk runs.
    pub fn desk() -> Self {
        Schedule {
            epochs: 16,
            milestones: vec![8, 13],
            lr_decay: 0.1,
            tuning_epochs: 3,
            batch: 64,
            lr: 5e-4,
            weight_decay: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(PopError::config("batch size must be positive"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(PopError::config("learning rate must be positive"));
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(PopError::config("lr decay must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(PopError::config("weight decay must be nonnegative"));
        }
        let mut prev = None;
        for &m in &self.milestones {
            if m >= self.epochs {
                return Err(PopError::config(format!(
                    "milestone {m} beyond {} epochs",
                    self.epochs
                )));
            }
            if prev.is_some_and(|p| m <= p) {
                return Err(PopError::config("milestones must increase"));
            }
            prev = Some(m);
        }
        Ok(())
    }
}

// ── run configuration ────────────────────────────────────────────────

/// Everything that determines a continual run besides the dataset and
/// the pretrained backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: PromptMode,
    pub fusion: FusionMethod,
    /// Prompt rows per task (m). Zero disables task prompts — the
    /// shared-prompt baseline.
    pub prompt_rows: usize,
    /// POP prompt rows.
    pub pop_rows: usize,
    /// Replay buffer capacity; zero disables replay entirely.
    pub buffer_capacity: usize,
    /// Per-class training-sample cap (low-shot regime); `None` = all.
    pub kshot: Option<usize>,
    /// Train on buffer contents only, updating the buffer before each
    /// task instead of after.
    pub buffer_only: bool,
    pub weights: LossWeights,
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: PromptMode::Spt,
            fusion: FusionMethod::MeanAndCat,
            prompt_rows: 1,
            pop_rows: 1,
            buffer_capacity: 200,
            kshot: None,
            buffer_only: false,
            weights: LossWeights::default(),
            schedule: Schedule::desk(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.pop_rows == 0 {
            return Err(PopError::config("POP needs at least one prompt row"));
        }
        if self.prompt_rows == 0 && self.fusion != FusionMethod::PopTokenOnly {
            return Err(PopError::config(format!(
                "fusion `{}` needs task prompts; with zero prompt rows only \
                 pop-only fusion is defined",
                self.fusion
            )));
        }
        if self.buffer_only && self.buffer_capacity == 0 {
            return Err(PopError::config(
                "buffer-only training needs a nonzero buffer capacity",
            ));
        }
        if self.kshot == Some(0) {
            return Err(PopError::config("k-shot needs k >= 1"));
        }
        Ok(())
    }
}

// ── task specs ───────────────────────────────────────────────────────

/// One task's slice of the benchmark: its class ids and its train/test
/// samples (task ids stamped).
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Partition the benchmark's continual pool into `tasks` disjoint specs,
/// preserving the canonical class-major sample order within each.
pub fn task_specs(bench: &Benchmark, tasks: usize) -> Result<Vec<TaskSpec>> {
    let splits = split_tasks(&bench.spec, tasks)?;
    let mut specs: Vec<TaskSpec> = splits
        .iter()
        .map(|s| TaskSpec {
            task_id: s.task_id,
            class_ids: s.class_ids.clone(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let mut task_of: HashMap<usize, usize> = HashMap::new();
    for s in &splits {
        for &c in &s.class_ids {
            task_of.insert(c, s.task_id);
        }
    }
    let place = |pool: &[LabeledImage], pick_train: bool, specs: &mut Vec<TaskSpec>| {
        for img in pool {
            if let Some(&t) = task_of.get(&img.class_id) {
                let mut stamped = img.clone();
                stamped.task_id = t;
                let spec = &mut specs[t - 1];
                if pick_train {
                    spec.train.push(stamped);
                } else {
                    spec.test.push(stamped);
                }
            }
        }
    };
    place(&bench.cl.train, true, &mut specs);
    place(&bench.cl.test, false, &mut specs);
    for spec in &specs {
        if spec.train.is_empty() || spec.test.is_empty() {
            return Err(PopError::invalid(format!(
                "task {} has an empty split",
                spec.task_id
            )));
        }
    }
    Ok(specs)
}

// ── memory buffer ────────────────────────────────────────────────────

/// Class-balanced replay buffer: capacity is divided evenly over every
/// class seen so far (earlier class ids absorb the division remainder),
/// and each class's keeps are a uniform subsample in original order.
#[derive(Debug, Clone, Default)]
pub struct MemoryBuffer {
    capacity: usize,
    /// Class-major, ascending class id; within a class, original
    /// generation order.
    items: Vec<LabeledImage>,
}

/// Uniform without-replacement subsample of `0..len`, returned sorted so
/// downstream order stays canonical.
fn sample_indices(len: usize, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if take >= len {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..take {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    let mut kept = idx[..take].to_vec();
    kept.sort_unstable();
    kept
}

fn group_by_class(items: &[LabeledImage]) -> BTreeMap<usize, Vec<LabeledImage>> {
    let mut groups: BTreeMap<usize, Vec<LabeledImage>> = BTreeMap::new();
    for img in items {
        groups.entry(img.class_id).or_default().push(img.clone());
    }
    groups
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            capacity,
            items: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for img in &self.items {
            *counts.entry(img.class_id).or_insert(0) += 1;
        }
        counts
    }

    /// Admit a new task's samples: per-class quotas are recomputed over
    /// the union of stored and incoming classes, stored classes are
    /// down-sampled to quota, and incoming classes are sampled up to it.
    pub fn update(&mut self, incoming: &[LabeledImage], rng: &mut ChaCha8Rng) -> Result<()> {
        if self.capacity == 0 {
            return Err(PopError::protocol(
                "replay buffer is disabled (capacity 0)",
            ));
        }
        let mut groups = group_by_class(&self.items);
        for (class, imgs) in group_by_class(incoming) {
            if groups.insert(class, imgs).is_some() {
                return Err(PopError::protocol(format!(
                    "class {class} is already buffered; task class sets must be disjoint"
                )));
            }
        }
        let n_classes = groups.len();
        if self.capacity < n_classes {
            return Err(PopError::protocol(format!(
                "buffer capacity {} cannot hold one sample for each of {n_classes} classes",
                self.capacity
            )));
        }
        let quota = self.capacity / n_classes;
        let remainder = self.capacity % n_classes;
        self.items.clear();
        for (rank, (_, imgs)) in groups.into_iter().enumerate() {
            let q = quota + usize::from(rank < remainder);
            for i in sample_indices(imgs.len(), q, rng) {
                self.items.push(imgs[i].clone());
            }
        }
        Ok(())
    }
}

/// Per-class low-shot cap: a uniform subsample of min(k, available)
/// items per class, kept in canonical class-major order.
pub fn subsample_kshot(
    items: &[LabeledImage],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledImage>> {
    if k == 0 {
        return Err(PopError::invalid("k-shot needs k >= 1"));
    }
    let mut out = Vec::new();
    for (_, imgs) in group_by_class(items) {
        for i in sample_indices(imgs.len(), k, rng) {
            out.push(imgs[i].clone());
        }
    }
    Ok(out)
}

/// Merge two class-major pools back into one canonical class-major pool.
fn canonical_union(a: &[LabeledImage], b: &[LabeledImage]) -> Vec<LabeledImage> {
    let mut all: Vec<LabeledImage> = a.iter().chain(b.iter()).cloned().collect();
    all.sort_by_key(|img| img.class_id);
    all
}

// ── metrics ──────────────────────────────────────────────────────────

/// Accuracy record for one run. All values are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    /// A_t: accuracy over all classes seen so far, after task t.
    pub cumulative: Vec<f64>,
    /// Accuracy on each task's own test split after the final task.
    pub per_task_final: Vec<f64>,
}

impl MetricLog {
    /// AA: the mean of the cumulative accuracies.
    pub fn average_accuracy(&self) -> f64 {
        if self.cumulative.is_empty() {
            return 0.0;
        }
        self.cumulative.iter().sum::<f64>() / self.cumulative.len() as f64
    }

    /// CSV with columns (run_id, seed, task, split, metric, value); the
    /// summary row uses task 0. No timestamps — byte-identical across
    /// repeated runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,seed,task,split,metric,value\n");
        for (i, a) in self.cumulative.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},cumulative,accuracy,{a}\n",
                self.run_id,
                self.seed,
                i + 1
            ));
        }
        for (i, a) in self.per_task_final.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},task_final,accuracy,{a}\n",
                self.run_id,
                self.seed,
                i + 1
            ));
        }
        out.push_str(&format!(
            "{},{},0,summary,average_accuracy,{}\n",
            self.run_id,
            self.seed,
            self.average_accuracy()
        ));
        out
    }
}

/// Top-1 accuracy of logit rows against targets (ties resolve to the
/// lower index, matching `argmax`).
pub fn top1_accuracy<T: Scalar>(logits: &[T], classes: usize, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(PopError::invalid("cannot score an empty set"));
    }
    if logits.len() != classes * targets.len() {
        return Err(PopError::invalid(format!(
            "{} logits for {} samples x {classes} classes",
            logits.len(),
            targets.len()
        )));
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&logits[i * classes..(i + 1) * classes]) == y)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

// ── continual state ──────────────────────────────────────────────────

/// The mutable model state threaded through a continual run.
pub struct ContinualState<T: Scalar> {
    pub vit: Vit,
    pub store: ParamStore<T>,
    pub prompts: PromptStore,
    pub heads: HeadSet,
    pub buffer: MemoryBuffer,
    pub cfg: RunConfig,
    pub seed: u64,
    /// Global class id → cumulative 0-based class index.
    class_index: HashMap<usize, usize>,
    /// Within-task local label per global class id.
    local_index: HashMap<usize, usize>,
    /// Test splits of completed tasks, for cumulative evaluation.
    seen_tests: Vec<Vec<LabeledImage>>,
    completed: usize,
}

impl<T: Scalar> ContinualState<T> {
    /// Wrap a pretrained, frozen backbone in fresh continual state.
    pub fn new(vit: Vit, store: ParamStore<T>, cfg: RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let prompts = PromptStore::new(
            cfg.mode,
            cfg.prompt_rows,
            cfg.pop_rows,
            vit.cfg.depth,
            vit.cfg.embed_dim,
        )?;
        let heads = HeadSet::new(vit.cfg.embed_dim, cfg.fusion);
        let buffer = MemoryBuffer::new(cfg.buffer_capacity);
        Ok(ContinualState {
            vit,
            store,
            prompts,
            heads,
            buffer,
            cfg,
            seed,
            class_index: HashMap::new(),
            local_index: HashMap::new(),
            seen_tests: Vec::new(),
            completed: 0,
        })
    }

    pub fn completed_tasks(&self) -> usize {
        self.completed
    }

    fn register_classes(&mut self, spec: &TaskSpec) -> Result<()> {
        for (local, &c) in spec.class_ids.iter().enumerate() {
            if self.class_index.contains_key(&c) {
                return Err(PopError::protocol(format!(
                    "class {c} appears in more than one task"
                )));
            }
            self.class_index.insert(c, self.class_index.len());
            self.local_index.insert(c, local);
        }
        Ok(())
    }

    fn class_idx(&self, img: &LabeledImage) -> Result<usize> {
        self.class_index.get(&img.class_id).copied().ok_or_else(|| {
            PopError::protocol(format!("class {} was never registered", img.class_id))
        })
    }

    /// Encode a batch and fuse per the configured method. FfCat runs one
    /// encode per task; everything else shares a single joint encode.
    /// Returns (fused feature, current-task feature for the aux head).
    fn forward_features(
        &self,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        batch: &[&LabeledImage],
        t: usize,
    ) -> Result<(NodeId, Option<NodeId>)> {
        if self.cfg.fusion == FusionMethod::FfCat {
            let mut outs: Vec<EncodeRefs> = Vec::with_capacity(t);
            for i in 1..=t {
                let segs = self.prompts.segs_for_task_only(i)?;
                outs.push(self.vit.encode(
                    &self.store,
                    tape,
                    binds,
                    batch,
                    &segs,
                    self.cfg.mode,
                )?);
            }
            let fused = self.prompts.fuse_ffcat(tape, &outs, t)?;
            let f_t = self.prompts.task_feature(tape, &outs[t - 1], t)?;
            Ok((fused, Some(f_t)))
        } else {
            let segs = self.prompts.segs_for_encode();
            let out = self
                .vit
                .encode(&self.store, tape, binds, batch, &segs, self.cfg.mode)?;
            let fused = self.prompts.fuse(tape, &out, self.cfg.fusion, t)?;
            let f_t = if self.cfg.prompt_rows > 0 {
                Some(self.prompts.task_feature(tape, &out, t)?)
            } else {
                None
            };
            Ok((fused, f_t))
        }
    }

    /// One optimizer step over a batch. Returns the total loss value.
    fn train_step(
        &mut self,
        opt: &mut Optimizer<T>,
        batch: &[&LabeledImage],
        t: usize,
    ) -> Result<f64> {
        let mut tape = Tape::<T>::new();
        let mut binds = StepBindings::new();
        let (fused, f_t) = self.forward_features(&mut tape, &mut binds, batch, t)?;

        let mut task_ids = Vec::with_capacity(batch.len());
        let mut class_idx = Vec::with_capacity(batch.len());
        let mut aux_targets = Vec::with_capacity(batch.len());
        for img in batch {
            let k = img.task_id;
            task_ids.push(k);
            class_idx.push(self.class_idx(img)?);
            let local = *self.local_index.get(&img.class_id).ok_or_else(|| {
                PopError::protocol(format!("class {} has no local label", img.class_id))
            })?;
            aux_targets.push(aux_target(local, k, t)?);
        }

        let (l_task, l_class) = self.heads.cil_losses(
            &self.store,
            &mut tape,
            &mut binds,
            fused,
            &task_ids,
            &class_idx,
        )?;
        let l_aux = match f_t {
            Some(f_t) => {
                self.heads
                    .aux_loss(&self.store, &mut tape, &mut binds, f_t, &aux_targets)?
            }
            // no task prompts → no auxiliary feature; the term is zero
            None => tape.scalar_leaf(T::zero()),
        };
        let loss = total_loss(&mut tape, l_class, l_task, l_aux, &self.cfg.weights)?;
        tape.backward(loss)?;
        binds.harvest(&mut self.store, &tape)?;
        opt.step(&mut self.store)?;
        Ok(tape.value(loss)[0].to_f64())
    }

    /// Train `epochs` epochs over `pool`, shuffling each epoch from its
    /// own seed stream. `lr_plan` maps epoch → learning rate.
    fn train_stage(
        &mut self,
        pool: &[LabeledImage],
        epochs: usize,
        stage_tag: &str,
        lr_plan: impl Fn(usize) -> f64,
    ) -> Result<()> {
        if pool.is_empty() {
            return Err(PopError::protocol(format!(
                "{stage_tag}: empty training pool"
            )));
        }
        let t = self.completed + 1;
        let mut opt = Optimizer::new(AdamConfig {
            lr: self.cfg.schedule.lr,
            weight_decay: self.cfg.schedule.weight_decay,
            ..AdamConfig::default()
        });
        let batch_size = self.cfg.schedule.batch;
        for epoch in 0..epochs {
            opt.set_lr(lr_plan(epoch));
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let mut rng = stream(self.seed, &format!("task/{t}/{stage_tag}/epoch/{epoch}"));
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &pool[i]).collect();
                self.train_step(&mut opt, &batch, t)?;
            }
        }
        Ok(())
    }

    /// Class-balanced tuning pool: current data capped per class at the
    /// smallest buffered class count, merged with the whole buffer.
    fn tuning_pool(&self, current: &[LabeledImage], t: usize) -> Result<Vec<LabeledImage>> {
        let counts = self.buffer.per_class_counts();
        let floor = counts.values().copied().min().unwrap_or(0);
        if floor == 0 {
            return Err(PopError::protocol("tuning stage needs a non-empty buffer"));
        }
        let mut rng = stream(self.seed, &format!("task/{t}/tune/subsample"));
        let mut pool = Vec::new();
        for (_, imgs) in group_by_class(current) {
            for i in sample_indices(imgs.len(), floor, &mut rng) {
                pool.push(imgs[i].clone());
            }
        }
        Ok(canonical_union(&pool, self.buffer.items()))
    }

    /// Run one task through the full protocol. Returns A_t, the
    /// cumulative test accuracy after the task.
    pub fn run_task(&mut self, spec: &TaskSpec) -> Result<f64> {
        let t = self.completed + 1;
        if spec.task_id != t {
            return Err(PopError::protocol(format!(
                "task {} out of order: expected task {t}",
                spec.task_id
            )));
        }
        if spec.train.is_empty() || spec.test.is_empty() {
            return Err(PopError::protocol(format!("task {t} has an empty split")));
        }
        self.register_classes(spec)?;

        let current: Vec<LabeledImage> = match self.cfg.kshot {
            Some(k) => subsample_kshot(
                &spec.train,
                k,
                &mut stream(self.seed, &format!("task/{t}/kshot")),
            )?,
            None => spec.train.clone(),
        };

        // buffer-only mode admits the new classes before training and
        // then trains purely on buffer contents
        let train_pool: Vec<LabeledImage> = if self.cfg.buffer_only {
            self.buffer
                .update(&current, &mut stream(self.seed, &format!("task/{t}/buffer")))?;
            let counts = self.buffer.per_class_counts();
            for &c in self.class_index.keys() {
                if !counts.contains_key(&c) {
                    return Err(PopError::protocol(format!(
                        "buffer-only training but class {c} is not in the buffer"
                    )));
                }
            }
            self.buffer.items().to_vec()
        } else {
            canonical_union(self.buffer.items(), &current)
        };

        self.prompts.begin_task(
            &mut self.store,
            t,
            &mut stream(self.seed, &format!("task/{t}/prompt-init")),
        )?;
        self.heads.expand(&mut self.store, spec.class_ids.len(), t)?;

        let sched = self.cfg.schedule.clone();
        self.train_stage(&train_pool, sched.epochs, "main", |e| {
            lr_at_epoch(sched.lr, &sched.milestones, sched.lr_decay, e)
        })?;

        if t > 1 && sched.tuning_epochs > 0 && !self.buffer.is_empty() {
            let tuning_current: &[LabeledImage] =
                if self.cfg.buffer_only { &[] } else { &current };
            let pool = self.tuning_pool(tuning_current, t)?;
            let tuned_lr = sched.lr * 0.1;
            self.train_stage(&pool, sched.tuning_epochs, "tune", |_| tuned_lr)?;
        }

        if !self.cfg.buffer_only && self.cfg.buffer_capacity > 0 {
            self.buffer
                .update(&current, &mut stream(self.seed, &format!("task/{t}/buffer")))?;
        }

        self.seen_tests.push(spec.test.clone());
        self.completed = t;
        self.evaluate_cumulative()
    }

    /// Score a test pool with the class head over the configured fusion.
    fn evaluate_pool(&self, pool: &[&LabeledImage]) -> Result<f64> {
        if pool.is_empty() {
            return Err(PopError::invalid("cannot evaluate an empty test set"));
        }
        let t = self.completed;
        if t == 0 {
            return Err(PopError::protocol("no tasks completed"));
        }
        let classes = self.heads.cumulative_classes();
        let mut hits = 0usize;
        for chunk in pool.chunks(self.cfg.schedule.batch) {
            let mut tape = Tape::<T>::new();
            let mut binds = StepBindings::new();
            let (fused, _) = self.forward_features(&mut tape, &mut binds, chunk, t)?;
            let logits = self
                .heads
                .class_logits(&self.store, &mut tape, &mut binds, fused)?;
            let rows = tape.value(logits);
            for (i, img) in chunk.iter().enumerate() {
                let want = self.class_idx(img)?;
                if argmax(&rows[i * classes..(i + 1) * classes]) == want {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / pool.len() as f64)
    }

    /// A_t over every completed task's test split.
    pub fn evaluate_cumulative(&self) -> Result<f64> {
        let pool: Vec<&LabeledImage> = self.seen_tests.iter().flatten().collect();
        self.evaluate_pool(&pool)
    }

    /// Accuracy on one completed task's own test split.
    pub fn evaluate_task(&self, task_id: usize) -> Result<f64> {
        if task_id == 0 || task_id > self.completed {
            return Err(PopError::invalid(format!(
                "task {task_id} not completed (1..={})",
                self.completed
            )));
        }
        let pool: Vec<&LabeledImage> = self.seen_tests[task_id - 1].iter().collect();
        self.evaluate_pool(&pool)
    }
}

/// Content hash of a run configuration (and anything else serialized
/// into the manifest), for run identification.
pub fn config_hash(manifest: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(manifest).expect("manifest serializes");
    let digest = Sha256::digest(&bytes);
    let mut s = String::with_capacity(24);
    for b in digest.iter().take(6) {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// The (config hash, run id) pair a run will be recorded under. The hash
/// covers the run configuration and backbone shape; the id appends the
/// seed, so sweeps over seeds share a hash but never a run id.
pub fn run_identity(cfg: &RunConfig, backbone: &BackboneConfig, seed: u64) -> (String, String) {
    let manifest = serde_json::json!({
        "run": cfg,
        "backbone": backbone,
    });
    let hash = config_hash(&manifest);
    let run_id = format!("{hash}-s{seed}");
    (hash, run_id)
}

/// Run a full task sequence and collect metrics.
pub fn run_sequence<T: Scalar>(
    state: &mut ContinualState<T>,
    specs: &[TaskSpec],
) -> Result<MetricLog> {
    if specs.is_empty() {
        return Err(PopError::invalid("no tasks to run"));
    }
    let (hash, run_id) = run_identity(&state.cfg, &state.vit.cfg, state.seed);
    let mut log = MetricLog {
        run_id,
        seed: state.seed,
        config_hash: hash,
        cumulative: Vec::new(),
        per_task_final: Vec::new(),
    };
    for spec in specs {
        log.cumulative.push(state.run_task(spec)?);
    }
    for t in 1..=specs.len() {
        log.per_task_final.push(state.evaluate_task(t)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::vit::BackboneConfig;

    fn tiny_backbone() -> (Vit, ParamStore<f32>) {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let vit = Vit::new(cfg).unwrap();
        let mut store = ParamStore::new();
        vit.init_params(&mut store, &mut stream(1, "test/driver-init"))
            .unwrap();
        store.set_trainable_prefix("backbone/", false);
        (vit, store)
    }

    fn tiny_bench(seed: u64) -> Benchmark {
        let spec = DatasetSpec {
            image_size: 8,
            pretrain_classes: 2,
            cl_classes: 4,
            train_per_class: 12,
            test_per_class: 4,
            seed,
            ..DatasetSpec::default()
        };
        crate::data::generate(&spec).unwrap()
    }

    fn tiny_schedule(epochs: usize) -> Schedule {
        Schedule {
            epochs,
            milestones: vec![],
            lr_decay: 0.1,
            tuning_epochs: 1,
            batch: 8,
            lr: 5e-3,
            weight_decay: 1e-6,
        }
    }

    fn labeled(class_id: usize, task_id: usize, tag: f32) -> LabeledImage {
        LabeledImage {
            pixels: vec![tag],
            class_id,
            task_id,
        }
    }

    #[test]
    fn schedule_defaults_and_validation() {
        let full = Schedule::full();
        assert_eq!(full.epochs, 170);
        assert_eq!(full.milestones, vec![60, 100, 120]);
        assert_eq!(full.batch, 64);
        assert_eq!(full.tuning_epochs, 20);
        assert!((full.lr - 5e-4).abs() < 1e-12);
        assert!((full.weight_decay - 1e-6).abs() < 1e-12);
        full.validate().unwrap();
        let desk = Schedule::desk();
        assert_eq!(desk.epochs, 16);
        assert_eq!(desk.milestones, vec![8, 13]);
        desk.validate().unwrap();

        let mut bad = Schedule::desk();
        bad.milestones = vec![12, 40];
        assert!(bad.validate().is_err());
        bad = Schedule::desk();
        bad.milestones = vec![20, 12];
        assert!(bad.validate().is_err());
        bad = Schedule::desk();
        bad.batch = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_config_validation() {
        RunConfig::default().validate().unwrap();
        let no_task_prompts = RunConfig {
            prompt_rows: 0,
            ..RunConfig::default()
        };
        assert!(no_task_prompts.validate().is_err());
        let pop_only = RunConfig {
            fusion: FusionMethod::PopTokenOnly,
            ..no_task_prompts
        };
        pop_only.validate().unwrap();
        let no_buffer_to_train_on = RunConfig {
            buffer_only: true,
            buffer_capacity: 0,
            ..RunConfig::default()
        };
        assert!(no_buffer_to_train_on.validate().is_err());
        let zero_shot = RunConfig {
            kshot: Some(0),
            ..RunConfig::default()
        };
        assert!(zero_shot.validate().is_err());
    }

    #[test]
    fn buffer_quota_examples() {
        // 1000 over 20 classes → 50 each
        let mut buf = MemoryBuffer::new(1000);
        let items: Vec<LabeledImage> = (0..20)
            .flat_map(|c| (0..60).map(move |i| labeled(c, 1, i as f32)))
            .collect();
        buf.update(&items, &mut stream(0, "b")).unwrap();
        assert_eq!(buf.len(), 1000);
        assert!(buf.per_class_counts().values().all(|&n| n == 50));

        // 1000 over a first task of 4 classes → 250 each
        let mut buf = MemoryBuffer::new(1000);
        let items: Vec<LabeledImage> = (0..4)
            .flat_map(|c| (0..300).map(move |i| labeled(c, 1, i as f32)))
            .collect();
        buf.update(&items, &mut stream(0, "b")).unwrap();
        assert!(buf.per_class_counts().values().all(|&n| n == 250));
    }

    #[test]
    fn buffer_remainder_goes_to_lowest_class_ids() {
        let mut buf = MemoryBuffer::new(10);
        let items: Vec<LabeledImage> = (0..4)
            .flat_map(|c| (0..5).map(move |i| labeled(c, 1, i as f32)))
            .collect();
        buf.update(&items, &mut stream(0, "b")).unwrap();
        let counts: Vec<usize> = buf.per_class_counts().values().copied().collect();
        assert_eq!(counts, vec![3, 3, 2, 2]);
        assert_eq!(buf.len(), 10);
    }

    #[test]
    fn buffer_rebalances_across_tasks_and_respects_capacity() {
        let mut buf = MemoryBuffer::new(40);
        let mut next = 0.0;
        for task in 1..=5 {
            let items: Vec<LabeledImage> = ((task - 1) * 4..task * 4)
                .flat_map(|c| {
                    (0..30).map(move |i| labeled(c, task, i as f32))
                })
                .collect();
            buf.update(&items, &mut stream(7, &format!("b/{task}")))
                .unwrap();
            assert!(buf.len() <= 40, "capacity exceeded at task {task}");
            let counts = buf.per_class_counts();
            let (lo, hi) = (
                counts.values().min().unwrap(),
                counts.values().max().unwrap(),
            );
            assert!(hi - lo <= 1, "imbalance at task {task}: {counts:?}");
            next += 1.0;
        }
        assert_eq!(next, 5.0);
        assert_eq!(buf.len(), 40);
        assert_eq!(buf.per_class_counts().len(), 20);
    }

    #[test]
    fn buffer_keeps_original_order_within_class() {
        let mut buf = MemoryBuffer::new(6);
        let items: Vec<LabeledImage> = (0..2)
            .flat_map(|c| (0..10).map(move |i| labeled(c, 1, i as f32)))
            .collect();
        buf.update(&items, &mut stream(3, "b")).unwrap();
        for class in 0..2 {
            let tags: Vec<f32> = buf
                .items()
                .iter()
                .filter(|img| img.class_id == class)
                .map(|img| img.pixels[0])
                .collect();
            let mut sorted = tags.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(tags, sorted);
        }
    }

    #[test]
    fn buffer_capacity_below_class_count_is_an_error() {
        let mut buf = MemoryBuffer::new(3);
        let items: Vec<LabeledImage> = (0..4).map(|c| labeled(c, 1, 0.0)).collect();
        let err = buf.update(&items, &mut stream(0, "b")).unwrap_err();
        assert!(err.to_string().contains("capacity 3"));
        // capacity 0 means replay is disabled
        let mut off = MemoryBuffer::new(0);
        assert!(off.update(&items, &mut stream(0, "b")).is_err());
    }

    #[test]
    fn kshot_subsample_counts_and_determinism() {
        let items: Vec<LabeledImage> = (0..4)
            .flat_map(|c| (0..50).map(move |i| labeled(c, 1, i as f32)))
            .collect();
        let full = subsample_kshot(&items, 60, &mut stream(0, "k")).unwrap();
        assert_eq!(full.len(), items.len());
        let small = subsample_kshot(&items, 20, &mut stream(0, "k")).unwrap();
        assert_eq!(small.len(), 80);
        let again = subsample_kshot(&items, 20, &mut stream(0, "k")).unwrap();
        let ids = |v: &[LabeledImage]| -> Vec<(usize, i64)> {
            v.iter().map(|i| (i.class_id, i.pixels[0] as i64)).collect()
        };
        assert_eq!(ids(&small), ids(&again));
        assert!(subsample_kshot(&items, 0, &mut stream(0, "k")).is_err());
    }

    #[test]
    fn task_specs_partition_the_pool() {
        let bench = tiny_bench(5);
        let specs = task_specs(&bench, 2).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].class_ids, vec![2, 3]);
        assert_eq!(specs[1].class_ids, vec![4, 5]);
        for spec in &specs {
            assert_eq!(spec.train.len(), 2 * 12);
            assert_eq!(spec.test.len(), 2 * 4);
            assert!(spec
                .train
                .iter()
                .all(|img| img.task_id == spec.task_id
                    && spec.class_ids.contains(&img.class_id)));
        }
    }

    #[test]
    fn top1_accuracy_matches_a_hand_count() {
        // 10 samples, 3 classes; rows picked so exactly 7 are right,
        // including one decided by the tie-to-lowest rule
        let rows: Vec<f64> = vec![
            9.0, 1.0, 1.0, // → 0 hit
            0.0, 5.0, 2.0, // → 1 hit
            0.0, 1.0, 8.0, // → 2 hit
            4.0, 4.0, 0.0, // tie → 0 hit
            1.0, 2.0, 3.0, // → 2 miss (want 0)
            6.0, 0.0, 0.0, // → 0 hit
            0.0, 3.0, 1.0, // → 1 hit
            2.0, 2.0, 2.0, // tie → 0 miss (want 2)
            0.0, 9.0, 0.0, // → 1 hit
            0.0, 0.0, 7.0, // → 2 miss (want 1)
        ];
        let targets = [0, 1, 2, 0, 0, 0, 1, 2, 1, 1];
        let acc = top1_accuracy(&rows, 3, &targets).unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
        assert!(top1_accuracy::<f64>(&[], 3, &[]).is_err());
    }

    #[test]
    fn metric_log_average_and_csv_shape() {
        let log = MetricLog {
            run_id: "abc-s1".into(),
            seed: 1,
            config_hash: "abc".into(),
            cumulative: vec![1.0, 0.5],
            per_task_final: vec![0.75, 0.5],
        };
        assert!((log.average_accuracy() - 0.75).abs() < 1e-12);
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run_id,seed,task,split,metric,value");
        assert_eq!(lines[1], "abc-s1,1,1,cumulative,accuracy,1");
        assert_eq!(lines[4], "abc-s1,1,2,task_final,accuracy,0.5");
        assert_eq!(lines[5], "abc-s1,1,0,summary,average_accuracy,0.75");
        assert_eq!(lines.len(), 6);
    }

    fn smoke_config(epochs: usize) -> RunConfig {
        RunConfig {
            buffer_capacity: 16,
            schedule: tiny_schedule(epochs),
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_identity_shares_hash_across_seeds_only() {
        let (vit, _) = tiny_backbone();
        let cfg = smoke_config(2);
        let (h1, id1) = run_identity(&cfg, &vit.cfg, 1);
        let (h2, id2) = run_identity(&cfg, &vit.cfg, 2);
        assert_eq!(h1, h2);
        assert_ne!(id1, id2);
        assert_eq!(id1, format!("{h1}-s1"));

        let other = RunConfig {
            fusion: FusionMethod::MaxPooling,
            ..smoke_config(2)
        };
        let (h3, _) = run_identity(&other, &vit.cfg, 1);
        assert_ne!(h1, h3);
    }

    #[test]
    fn two_task_run_produces_sane_deterministic_metrics() {
        let bench = tiny_bench(5);
        let specs = task_specs(&bench, 2).unwrap();
        let run = || {
            let (vit, store) = tiny_backbone();
            let mut state =
                ContinualState::new(vit, store, smoke_config(2), 11).unwrap();
            run_sequence(&mut state, &specs).unwrap()
        };
        let log = run();
        assert_eq!(log.cumulative.len(), 2);
        assert_eq!(log.per_task_final.len(), 2);
        for a in log.cumulative.iter().chain(&log.per_task_final) {
            assert!((0.0..=1.0).contains(a));
        }
        let again = run();
        assert_eq!(log, again);
        assert_eq!(log.to_csv(), again.to_csv());
    }

    #[test]
    fn single_task_average_equals_first_accuracy() {
        let bench = tiny_bench(6);
        let specs = task_specs(&bench, 1).unwrap();
        let (vit, store) = tiny_backbone();
        let mut state = ContinualState::new(vit, store, smoke_config(1), 3).unwrap();
        let log = run_sequence(&mut state, &specs).unwrap();
        assert_eq!(log.cumulative.len(), 1);
        assert!((log.average_accuracy() - log.cumulative[0]).abs() < 1e-15);
    }

    #[test]
    fn out_of_order_tasks_are_rejected() {
        let bench = tiny_bench(7);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let mut state = ContinualState::new(vit, store, smoke_config(1), 3).unwrap();
        let err = state.run_task(&specs[1]).unwrap_err();
        assert!(err.to_string().contains("out of order"));
        state.run_task(&specs[0]).unwrap();
        let err = state.run_task(&specs[0]).unwrap_err();
        assert!(err.to_string().contains("out of order"));
    }

    #[test]
    fn frozen_parts_stay_bit_identical_through_a_run() {
        let bench = tiny_bench(8);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let mut state = ContinualState::new(vit, store, smoke_config(1), 9).unwrap();
        let backbone_before = state.store.digest_prefix("backbone/");
        state.run_task(&specs[0]).unwrap();
        let p1_before = state.store.digest("prompt/task/1").unwrap();
        let aux1_before = state.store.digest("head/aux/1/w").unwrap();
        state.run_task(&specs[1]).unwrap();
        assert_eq!(state.store.digest_prefix("backbone/"), backbone_before);
        assert_eq!(state.store.digest("prompt/task/1").unwrap(), p1_before);
        assert_eq!(state.store.digest("head/aux/1/w").unwrap(), aux1_before);
        // while the live parts moved
        assert!(state.store.get("prompt/task/2").unwrap().requires_grad);
    }

    #[test]
    fn tuning_pool_is_class_balanced() {
        let bench = tiny_bench(9);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let mut state = ContinualState::new(vit, store, smoke_config(1), 4).unwrap();
        state.run_task(&specs[0]).unwrap();
        // buffer now holds task-1 classes; build task 2's tuning pool
        let pool = state.tuning_pool(&specs[1].train, 2).unwrap();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for img in &pool {
            *counts.entry(img.class_id).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        let (lo, hi) = (
            counts.values().min().unwrap(),
            counts.values().max().unwrap(),
        );
        assert!(hi - lo <= 1, "tuning histogram not flat: {counts:?}");
    }

    #[test]
    fn full_capacity_buffer_only_equals_regular_run_bitwise() {
        let bench = tiny_bench(10);
        let specs = task_specs(&bench, 2).unwrap();
        let total = specs.iter().map(|s| s.train.len()).sum::<usize>();
        let run = |buffer_only: bool| {
            let (vit, store) = tiny_backbone();
            let cfg = RunConfig {
                buffer_capacity: total,
                buffer_only,
                schedule: tiny_schedule(2),
                ..RunConfig::default()
            };
            let mut state = ContinualState::new(vit, store, cfg, 21).unwrap();
            let log = run_sequence(&mut state, &specs).unwrap();
            (state.store.digest_prefix(""), log)
        };
        let (digest_regular, log_regular) = run(false);
        let (digest_buffer, log_buffer) = run(true);
        assert_eq!(digest_regular, digest_buffer);
        assert_eq!(log_regular.cumulative, log_buffer.cumulative);
        assert_eq!(log_regular.per_task_final, log_buffer.per_task_final);
    }

    #[test]
    fn kshot_run_trains_on_capped_pool() {
        let bench = tiny_bench(12);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let cfg = RunConfig {
            kshot: Some(3),
            buffer_capacity: 8,
            schedule: tiny_schedule(1),
            ..RunConfig::default()
        };
        let mut state = ContinualState::new(vit, store, cfg, 6).unwrap();
        let log = run_sequence(&mut state, &specs).unwrap();
        assert_eq!(log.cumulative.len(), 2);
        // buffered counts can't exceed what k-shot admitted
        assert!(state.buffer.per_class_counts().values().all(|&n| n <= 3));
    }

    #[test]
    fn baseline_mode_runs_without_task_prompts() {
        let bench = tiny_bench(13);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let cfg = RunConfig {
            prompt_rows: 0,
            fusion: FusionMethod::PopTokenOnly,
            buffer_capacity: 0,
            weights: LossWeights {
                lambda_task: 0.0,
                lambda_aux: 0.0,
            },
            schedule: tiny_schedule(1),
            ..RunConfig::default()
        };
        let mut state = ContinualState::new(vit, store, cfg, 2).unwrap();
        let log = run_sequence(&mut state, &specs).unwrap();
        assert_eq!(log.cumulative.len(), 2);
        assert!(state.store.get("prompt/task/1").is_err());
        assert!(state.buffer.is_empty());
    }

    #[test]
    fn ffcat_run_exercises_per_task_encodes() {
        let bench = tiny_bench(14);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let cfg = RunConfig {
            fusion: FusionMethod::FfCat,
            buffer_capacity: 8,
            schedule: tiny_schedule(1),
            ..RunConfig::default()
        };
        let mut state = ContinualState::new(vit, store, cfg, 8).unwrap();
        let log = run_sequence(&mut state, &specs).unwrap();
        assert_eq!(log.cumulative.len(), 2);
        assert_eq!(state.heads.input_dim(2), 2 * state.vit.cfg.embed_dim);
    }

    #[test]
    fn dpt_run_smoke() {
        let bench = tiny_bench(15);
        let specs = task_specs(&bench, 2).unwrap();
        let (vit, store) = tiny_backbone();
        let cfg = RunConfig {
            mode: PromptMode::Dpt,
            buffer_capacity: 8,
            schedule: tiny_schedule(1),
            ..RunConfig::default()
        };
        let mut state = ContinualState::new(vit, store, cfg, 16).unwrap();
        let log = run_sequence(&mut state, &specs).unwrap();
        assert_eq!(log.cumulative.len(), 2);
        let shape = state.store.get("prompt/task/1").unwrap().shape().to_vec();
        assert_eq!(shape, vec![state.vit.cfg.depth, 1, state.vit.cfg.embed_dim]);
    }
}
