//! Patch-embedding transformer encoder with prompt injection.
//!
//! The encoder is a pre-norm ViT: per block, `x += attn(LN(x))` then
//! `x += mlp(LN(x))`, with a final layer norm. Prompt tokens are appended
//! after the class token and patch tokens and receive no positional
//! encoding. Shallow prompt tuning (SPT) injects each prompt set once at
//! the input; deep prompt tuning (DPT) carries one prompt block per layer
//! and discards each layer's prompt-slot outputs, splicing in the next
//! layer's fresh prompts instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Benchmark, LabeledImage};
use crate::error::{PopError, Result};
use crate::param::{Optimizer, ParamStore, StepBindings};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::adam::AdamConfig;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Spt,
    Dpt,
}

impl std::str::FromStr for PromptMode {
    type Err = PopError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spt" => Ok(PromptMode::Spt),
            "dpt" => Ok(PromptMode::Dpt),
            other => Err(PopError::config(format!(
                "unknown prompt mode {other:?} (expected spt or dpt)"
            ))),
        }
    }
}

/// One prompt set to inject: the parameter's registered name and its token
/// count per layer. SPT parameters are m×d; DPT parameters are L×m×d.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSeg {
    pub name: String,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(PopError::config("image and patch sizes must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(PopError::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(PopError::config(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(PopError::config("depth, mlp ratio, channels must be positive"));
        }
        Ok(())
    }

    /// Patch tokens per image.
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Segmented outputs of one prompted forward pass. All fields are tape
/// nodes; `segments` preserves the injection order of the prompt sets.
#[derive(Debug)]
pub struct EncodeRefs {
    pub batch: usize,
    /// Class-token outputs, batch×d.
    pub r0: NodeId,
    /// Patch-token outputs, (batch·n)×d.
    pub patches: NodeId,
    /// (prompt set name, output node (batch·m)×d, m) per injected set.
    pub segments: Vec<(String, NodeId, usize)>,
    /// Full final token matrix, (batch·seq)×d.
    pub all_tokens: NodeId,
    /// One attention node per block (attention-weight access for audits).
    pub attn: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Vit {
    pub cfg: BackboneConfig,
}

impl Vit {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Vit { cfg })
    }

    /// Register freshly initialized backbone parameters (trainable).
    /// Weights are truncated-normal(0.02), biases and layer-norm shifts
    /// zero, layer-norm scales one.
    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let d = self.cfg.embed_dim;
        let pd = self.cfg.patch_dim();
        let n = self.cfg.n_patches();
        let hidden = d * self.cfg.mlp_ratio;
        let put = |store: &mut ParamStore<T>, name: String, t: Tensor<T>| {
            store.insert(&name, t.trainable())
        };
        put(
            store,
            "backbone/patch/w".into(),
            Tensor::trunc_normal(vec![pd, d], INIT_STD, rng),
        )?;
        put(store, "backbone/patch/b".into(), Tensor::zeros(vec![d]))?;
        put(
            store,
            "backbone/cls".into(),
            Tensor::trunc_normal(vec![1, d], INIT_STD, rng),
        )?;
        put(
            store,
            "backbone/pos".into(),
            Tensor::trunc_normal(vec![1 + n, d], INIT_STD, rng),
        )?;
        for l in 0..self.cfg.depth {
            for ln in ["ln1", "ln2"] {
                put(
                    store,
                    format!("backbone/block{l}/{ln}/gamma"),
                    Tensor::full(vec![d], T::one()),
                )?;
                put(
                    store,
                    format!("backbone/block{l}/{ln}/beta"),
                    Tensor::zeros(vec![d]),
                )?;
            }
            for w in ["wq", "wk", "wv", "wo"] {
                put(
                    store,
                    format!("backbone/block{l}/attn/{w}"),
                    Tensor::trunc_normal(vec![d, d], INIT_STD, rng),
                )?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                put(
                    store,
                    format!("backbone/block{l}/attn/{b}"),
                    Tensor::zeros(vec![d]),
                )?;
            }
            put(
                store,
                format!("backbone/block{l}/mlp/w1"),
                Tensor::trunc_normal(vec![d, hidden], INIT_STD, rng),
            )?;
            put(
                store,
                format!("backbone/block{l}/mlp/b1"),
                Tensor::zeros(vec![hidden]),
            )?;
            put(
                store,
                format!("backbone/block{l}/mlp/w2"),
                Tensor::trunc_normal(vec![hidden, d], INIT_STD, rng),
            )?;
            put(
                store,
                format!("backbone/block{l}/mlp/b2"),
                Tensor::zeros(vec![d]),
            )?;
        }
        put(
            store,
            "backbone/final/gamma".into(),
            Tensor::full(vec![d], T::one()),
        )?;
        put(store, "backbone/final/beta".into(), Tensor::zeros(vec![d]))?;
        Ok(())
    }

    /// Flatten a batch into the (batch·n)×patch_dim matrix consumed by the
    /// patch projection: non-overlapping patches in row-major patch order,
    /// pixels within a patch in row-major HWC order.
    pub fn patch_matrix<T: Scalar>(&self, images: &[&LabeledImage]) -> Result<Vec<T>> {
        let s = self.cfg.image_size;
        let c = self.cfg.channels;
        let p = self.cfg.patch_size;
        let side = s / p;
        let mut out = Vec::with_capacity(images.len() * self.cfg.n_patches() * self.cfg.patch_dim());
        for (idx, img) in images.iter().enumerate() {
            if img.pixels.len() != s * s * c {
                return Err(PopError::invalid(format!(
                    "image {idx} has {} pixels, config expects {}",
                    img.pixels.len(),
                    s * s * c
                )));
            }
            for pi in 0..side {
                for pj in 0..side {
                    for i in 0..p {
                        for j in 0..p {
                            let row = pi * p + i;
                            let col = pj * p + j;
                            let base = (row * s + col) * c;
                            for ch in 0..c {
                                out.push(T::from_f64(img.pixels[base + ch] as f64));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Embed patches and prepend the positional-encoded class token:
    /// rows [s_0+e_0, s_1+e_1 … s_n+e_n] per sample.
    fn base_tokens<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        images: &[&LabeledImage],
    ) -> Result<NodeId> {
        if images.is_empty() {
            return Err(PopError::invalid("empty batch"));
        }
        let batch = images.len();
        let n = self.cfg.n_patches();
        let x = tape.leaf(
            vec![batch * n, self.cfg.patch_dim()],
            self.patch_matrix(images)?,
            false,
        )?;
        let w = binds.bind(store, tape, "backbone/patch/w")?;
        let b = binds.bind(store, tape, "backbone/patch/b")?;
        let tok = tape.matmul(x, w)?;
        let tok = tape.add_row(tok, b)?;
        let cls = binds.bind(store, tape, "backbone/cls")?;
        let cls_b = tape.broadcast_rows(cls, batch)?;
        let base = tape.concat_rows(&[cls_b, tok], batch)?;
        let pos = binds.bind(store, tape, "backbone/pos")?;
        let pos_b = tape.broadcast_rows(pos, batch)?;
        tape.add(base, pos_b)
    }

    /// One transformer block over (batch·seq)×d tokens. Returns the new
    /// token matrix and the attention node.
    fn block<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        x: NodeId,
        batch: usize,
        l: usize,
    ) -> Result<(NodeId, NodeId)> {
        let name = |part: &str| format!("backbone/block{l}/{part}");
        let g1 = binds.bind(store, tape, &name("ln1/gamma"))?;
        let b1 = binds.bind(store, tape, &name("ln1/beta"))?;
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let proj = |tape: &mut Tape<T>, binds: &mut StepBindings, w: &str, b: &str| -> Result<NodeId> {
            let wn = binds.bind(store, tape, &name(w))?;
            let bn = binds.bind(store, tape, &name(b))?;
            let y = tape.matmul(h, wn)?;
            tape.add_row(y, bn)
        };
        let q = proj(tape, binds, "attn/wq", "attn/bq")?;
        let k = proj(tape, binds, "attn/wk", "attn/bk")?;
        let v = proj(tape, binds, "attn/wv", "attn/bv")?;
        let attn = tape.sdpa(q, k, v, batch, self.cfg.heads)?;
        let wo = binds.bind(store, tape, &name("attn/wo"))?;
        let bo = binds.bind(store, tape, &name("attn/bo"))?;
        let o = tape.matmul(attn, wo)?;
        let o = tape.add_row(o, bo)?;
        let x = tape.add(x, o)?;

        let g2 = binds.bind(store, tape, &name("ln2/gamma"))?;
        let b2 = binds.bind(store, tape, &name("ln2/beta"))?;
        let h2 = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = binds.bind(store, tape, &name("mlp/w1"))?;
        let bb1 = binds.bind(store, tape, &name("mlp/b1"))?;
        let m = tape.matmul(h2, w1)?;
        let m = tape.add_row(m, bb1)?;
        let m = tape.gelu(m);
        let w2 = binds.bind(store, tape, &name("mlp/w2"))?;
        let bb2 = binds.bind(store, tape, &name("mlp/b2"))?;
        let m = tape.matmul(m, w2)?;
        let m = tape.add_row(m, bb2)?;
        let x = tape.add(x, m)?;
        Ok((x, attn))
    }

    fn final_norm<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        x: NodeId,
    ) -> Result<NodeId> {
        let g = binds.bind(store, tape, "backbone/final/gamma")?;
        let b = binds.bind(store, tape, "backbone/final/beta")?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Prompt-free forward pass (pretraining and the reduction baseline the
    /// prompt path is tested against). Returns (r_0, patch outputs).
    pub fn forward_plain<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        images: &[&LabeledImage],
    ) -> Result<(NodeId, NodeId)> {
        let batch = images.len();
        let mut x = self.base_tokens(store, tape, binds, images)?;
        for l in 0..self.cfg.depth {
            (x, _) = self.block(store, tape, binds, x, batch, l)?;
        }
        let x = self.final_norm(store, tape, binds, x)?;
        let r0 = tape.slice_rows(x, batch, 0, 1)?;
        let patches = tape.slice_rows(x, batch, 1, self.cfg.n_patches())?;
        Ok((r0, patches))
    }

    /// Bind one prompt set's tokens for layer `l`, validating the layout
    /// for the active mode.
    fn bind_prompt<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        seg: &PromptSeg,
        mode: PromptMode,
        l: usize,
    ) -> Result<NodeId> {
        let d = self.cfg.embed_dim;
        let shape = store.get(&seg.name)?.shape().to_vec();
        match mode {
            PromptMode::Spt => {
                if shape != [seg.rows, d] {
                    return Err(PopError::invalid(format!(
                        "prompt {:?} has shape {shape:?}, shallow mode expects [{}, {d}]",
                        seg.name, seg.rows
                    )));
                }
                binds.bind(store, tape, &seg.name)
            }
            PromptMode::Dpt => {
                if shape != [self.cfg.depth, seg.rows, d] {
                    return Err(PopError::invalid(format!(
                        "prompt {:?} has shape {shape:?}, deep mode expects [{}, {}, {d}] (one block per layer)",
                        seg.name, self.cfg.depth, seg.rows
                    )));
                }
                binds.bind_slice(store, tape, &seg.name, l * seg.rows * d, vec![seg.rows, d])
            }
        }
    }

    /// Prompted forward pass. Token layout per sample:
    /// `[s_0+e_0, patches+E, segs[0], segs[1], …]` — callers put the POP
    /// set first, then task sets in ascending task order. Prompts get no
    /// positional encoding. In DPT mode each block's prompt-slot outputs
    /// are discarded and replaced by that set's next-layer prompts.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        binds: &mut StepBindings,
        images: &[&LabeledImage],
        segs: &[PromptSeg],
        mode: PromptMode,
    ) -> Result<EncodeRefs> {
        let batch = images.len();
        let n = self.cfg.n_patches();
        let base = self.base_tokens(store, tape, binds, images)?;
        let mut parts = vec![base];
        for seg in segs {
            if seg.rows == 0 {
                return Err(PopError::invalid(format!(
                    "prompt set {:?} has zero tokens",
                    seg.name
                )));
            }
            let p = self.bind_prompt(store, tape, binds, seg, mode, 0)?;
            parts.push(tape.broadcast_rows(p, batch)?);
        }
        let mut x = tape.concat_rows(&parts, batch)?;

        // per-sample row offsets of each prompt set
        let mut offsets = Vec::with_capacity(segs.len());
        let mut cursor = 1 + n;
        for seg in segs {
            offsets.push(cursor);
            cursor += seg.rows;
        }

        let mut attn_nodes = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            let (y, attn) = self.block(store, tape, binds, x, batch, l)?;
            x = y;
            attn_nodes.push(attn);
            if mode == PromptMode::Dpt && l + 1 < self.cfg.depth {
                // discard this block's prompt outputs; splice in the next
                // block's fresh prompts
                for (seg, &start) in segs.iter().zip(&offsets) {
                    let fresh = self.bind_prompt(store, tape, binds, seg, mode, l + 1)?;
                    x = tape.replace_rows(x, fresh, batch, start)?;
                }
            }
        }
        let x = self.final_norm(store, tape, binds, x)?;

        let r0 = tape.slice_rows(x, batch, 0, 1)?;
        let patches = tape.slice_rows(x, batch, 1, n)?;
        let mut segments = Vec::with_capacity(segs.len());
        for (seg, &start) in segs.iter().zip(&offsets) {
            let node = tape.slice_rows(x, batch, start, seg.rows)?;
            segments.push((seg.name.clone(), node, seg.rows));
        }
        Ok(EncodeRefs {
            batch,
            r0,
            patches,
            segments,
            all_tokens: x,
            attn: attn_nodes,
        })
    }
}

// ── Pretraining ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epoch indices (0-based) at which the learning rate drops.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            milestones: vec![20, 26],
            lr_decay: 0.1,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub holdout_accuracy: f64,
    pub classes: usize,
}

/// Learning rate in effect for a 0-based epoch under milestone decay.
pub fn lr_at_epoch(base: f64, milestones: &[usize], decay: f64, epoch: usize) -> f64 {
    let drops = milestones.iter().filter(|&&m| epoch >= m).count();
    base * decay.powi(drops as i32)
}

/// Supervised pretraining of the full backbone plus a temporary linear
/// head on the pretraining pool. The head is dropped and every backbone
/// parameter frozen before the store is returned.
pub fn pretrain_backbone<T: Scalar>(
    cfg: &BackboneConfig,
    pcfg: &PretrainConfig,
    bench: &Benchmark,
    seed: u64,
) -> Result<(ParamStore<T>, PretrainReport)> {
    use rand::seq::SliceRandom;

    let pre_ids: std::collections::BTreeSet<usize> =
        bench.pretrain.train.iter().map(|s| s.class_id).collect();
    let cl_ids: std::collections::BTreeSet<usize> =
        bench.cl.train.iter().map(|s| s.class_id).collect();
    if let Some(overlap) = pre_ids.intersection(&cl_ids).next() {
        return Err(PopError::protocol(format!(
            "class {overlap} appears in both the pretraining and CL pools"
        )));
    }
    if pcfg.batch == 0 {
        return Err(PopError::config("batch size must be positive"));
    }
    // global id -> dense head output index
    let classes: Vec<usize> = pre_ids.iter().copied().collect();
    let class_index = |id: usize| classes.binary_search(&id).expect("id from pool");

    let vit = Vit::new(cfg.clone())?;
    let mut store: ParamStore<T> = ParamStore::new();
    let mut rng = stream(seed, "pretrain/init");
    vit.init_params(&mut store, &mut rng)?;
    // a zero head would feed the backbone no gradient on the first steps,
    // so the temporary head follows the same init as every other weight
    store.insert(
        "pretrain/head/w",
        Tensor::trunc_normal(vec![cfg.embed_dim, classes.len()], INIT_STD, &mut rng).trainable(),
    )?;
    store.insert(
        "pretrain/head/b",
        Tensor::zeros(vec![classes.len()]).trainable(),
    )?;

    let mut opt = Optimizer::new(AdamConfig {
        lr: pcfg.lr,
        weight_decay: pcfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut epoch_loss = Vec::with_capacity(pcfg.epochs);
    for epoch in 0..pcfg.epochs {
        opt.set_lr(lr_at_epoch(pcfg.lr, &pcfg.milestones, pcfg.lr_decay, epoch));
        let mut order: Vec<usize> = (0..bench.pretrain.train.len()).collect();
        order.shuffle(&mut stream(seed, &format!("pretrain/epoch/{epoch}")));
        let mut loss_sum = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(pcfg.batch) {
            let images: Vec<&LabeledImage> =
                chunk.iter().map(|&i| &bench.pretrain.train[i]).collect();
            let targets: Vec<usize> = images.iter().map(|s| class_index(s.class_id)).collect();
            let mut tape = Tape::new();
            let mut binds = StepBindings::new();
            let (r0, _) = vit.forward_plain(&store, &mut tape, &mut binds, &images)?;
            let w = binds.bind(&store, &mut tape, "pretrain/head/w")?;
            let b = binds.bind(&store, &mut tape, "pretrain/head/b")?;
            let logits = tape.matmul(r0, w)?;
            let logits = tape.add_row(logits, b)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            binds.harvest(&mut store, &tape)?;
            opt.step(&mut store)?;
            loss_sum += tape.value(loss)[0].to_f64();
            batches += 1.0;
        }
        epoch_loss.push(loss_sum / batches.max(1.0));
    }

    // holdout accuracy with the temporary head, before discarding it
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in bench.pretrain.test.chunks(pcfg.batch.max(1)) {
        let images: Vec<&LabeledImage> = chunk.iter().collect();
        let mut tape = Tape::new();
        let mut binds = StepBindings::new();
        let (r0, _) = vit.forward_plain(&store, &mut tape, &mut binds, &images)?;
        let w = binds.bind(&store, &mut tape, "pretrain/head/w")?;
        let b = binds.bind(&store, &mut tape, "pretrain/head/b")?;
        let logits = tape.matmul(r0, w)?;
        let logits = tape.add_row(logits, b)?;
        let vals = tape.value(logits);
        let c = classes.len();
        for (i, img) in images.iter().enumerate() {
            let row = &vals[i * c..(i + 1) * c];
            let pred = argmax(row);
            if pred == class_index(img.class_id) {
                correct += 1;
            }
            total += 1;
        }
    }

    store.remove("pretrain/head/w")?;
    store.remove("pretrain/head/b")?;
    store.set_trainable_prefix("backbone/", false);
    Ok((
        store,
        PretrainReport {
            epoch_loss,
            holdout_accuracy: correct as f64 / total.max(1) as f64,
            classes: classes.len(),
        },
    ))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
