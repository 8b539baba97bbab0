//! Per-step computation tape. Forward calls record nodes in topological
//! order (inputs always precede outputs); `backward` walks the record once in
//! reverse and accumulates gradients for every node that requires them.

use crate::error::{PopError, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// x (r×c) + bias ([c]) broadcast over rows.
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Gelu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    SumAll {
        x: NodeId,
    },
    /// Per-sample mean over a segment: (batch·m)×d -> batch×d.
    MeanSegRows {
        x: NodeId,
        batch: usize,
        m: usize,
        d: usize,
    },
    /// Replicate an m×d block once per sample: -> (batch·m)×d.
    BroadcastRows {
        x: NodeId,
        batch: usize,
        m: usize,
        d: usize,
    },
    /// Per-sample row concatenation. Part i carries m_i rows per sample.
    ConcatRows {
        parts: Vec<(NodeId, usize)>,
        batch: usize,
        d: usize,
    },
    /// Column concatenation of equal-row-count matrices.
    ConcatCols {
        parts: Vec<(NodeId, usize)>,
        rows: usize,
    },
    /// Rows [start, start+len) of each sample: (batch·s_total)×d -> (batch·len)×d.
    SliceRows {
        x: NodeId,
        batch: usize,
        s_total: usize,
        start: usize,
        len: usize,
        d: usize,
    },
    /// Copy of x with rows [start, start+len) of each sample replaced by a
    /// broadcast len×d block. Gradient does not flow into the replaced rows
    /// of x.
    ReplaceRows {
        x: NodeId,
        new: NodeId,
        batch: usize,
        s_total: usize,
        start: usize,
        len: usize,
        d: usize,
    },
    /// Multi-head scaled dot-product attention over per-sample token blocks.
    /// q, k, v are (batch·seq)×d with `heads` head slices of d/heads columns.
    Sdpa {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    /// Elementwise max; ties route gradient to the left operand.
    MaxElem {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    /// Op-specific forward state needed by backward (softmax probabilities,
    /// layer-norm statistics, attention weights).
    aux: Vec<T>,
    requires_grad: bool,
}

/// Recorded computation graph for one training step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, aux: Vec<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false, // set by `leaf`
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::MaxElem { a, b } => {
                self.wants(*a) || self.wants(*b)
            }
            Op::AddRow { x, bias } => self.wants(*x) || self.wants(*bias),
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x, .. }
            | Op::SumAll { x }
            | Op::MeanSegRows { x, .. }
            | Op::BroadcastRows { x, .. }
            | Op::SliceRows { x, .. } => self.wants(*x),
            Op::LayerNorm { x, gamma, beta } => {
                self.wants(*x) || self.wants(*gamma) || self.wants(*beta)
            }
            Op::CrossEntropy { logits, .. } => self.wants(*logits),
            Op::ConcatRows { parts, .. } | Op::ConcatCols { parts, .. } => {
                parts.iter().any(|(p, _)| self.wants(*p))
            }
            Op::ReplaceRows { x, new, .. } => self.wants(*x) || self.wants(*new),
            Op::Sdpa { q, k, v, .. } => self.wants(*q) || self.wants(*k) || self.wants(*v),
        };
        self.nodes.push(Node {
            op,
            shape,
            data,
            aux,
            requires_grad,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].data
    }

    /// Gradient of the last backward pass, if one was accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.wants(id)
    }

    /// Attention weights of an Sdpa node: (probs, batch, heads, seq) with
    /// probs laid out [(b·heads + h)·seq² ..]. Rows are softmax outputs.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&[T], usize, usize, usize)> {
        match self.nodes[id].op {
            Op::Sdpa {
                batch, seq, heads, ..
            } => Some((&self.nodes[id].aux, batch, heads, seq)),
            _ => None,
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<NodeId> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(PopError::invalid(format!(
                "leaf shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        let id = self.push(Op::Leaf, shape, data, Vec::new());
        self.nodes[id].requires_grad = requires_grad;
        Ok(id)
    }

    pub fn scalar_leaf(&mut self, value: T) -> NodeId {
        self.leaf(vec![], vec![value], false).expect("scalar leaf")
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(PopError::invalid(format!(
                "{op} expects a 2-d operand, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(PopError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let data = kernels::matmul(&self.nodes[a].data, &self.nodes[b].data, m, ka, n);
        Ok(self.push(Op::Matmul { a, b, m, k: ka, n }, vec![m, n], data, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(PopError::ShapeMismatch {
                op: "add",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let mut data = self.nodes[a].data.clone();
        kernels::add_assign(&mut data, &self.nodes[b].data);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data, Vec::new()))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "add_row")?;
        if self.nodes[bias].shape != [c] {
            return Err(PopError::ShapeMismatch {
                op: "add_row",
                left: self.nodes[x].shape.clone(),
                right: self.nodes[bias].shape.clone(),
            });
        }
        let mut data = self.nodes[x].data.clone();
        for i in 0..r {
            kernels::add_assign(&mut data[i * c..(i + 1) * c], &self.nodes[bias].data);
        }
        Ok(self.push(Op::AddRow { x, bias }, vec![r, c], data, Vec::new()))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Scale { x, c }, shape, data, Vec::new())
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[x].data.iter().map(|&v| gelu_value(v)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Gelu { x }, shape, data, Vec::new())
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        if axis >= shape.len() {
            return Err(PopError::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(PopError::NonFinite("softmax input"));
        }
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.nodes[x].data.clone();
        for o in 0..outer {
            for i in 0..inner {
                softmax_lane(&mut data, o * alen * inner + i, alen, inner);
            }
        }
        Ok(self.push(Op::Softmax { x, axis }, shape, data, Vec::new()))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        let c = *shape.last().ok_or_else(|| {
            PopError::invalid("layer_norm expects an operand with at least one axis")
        })?;
        if self.nodes[gamma].shape != [c] || self.nodes[beta].shape != [c] {
            return Err(PopError::ShapeMismatch {
                op: "layer_norm",
                left: shape.clone(),
                right: self.nodes[gamma].shape.clone(),
            });
        }
        let vectors = self.nodes[x].data.len() / c;
        let mut data = vec![T::zero(); self.nodes[x].data.len()];
        // aux holds (mean, rstd) per vector
        let mut aux = vec![T::zero(); vectors * 2];
        let epsv = T::from_f64(eps);
        let inv_c = T::one() / T::from_usize(c);
        for v in 0..vectors {
            let xs = &self.nodes[x].data[v * c..(v + 1) * c];
            let mut mean = T::zero();
            for &xv in xs {
                mean = mean + xv;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &xv in xs {
                let dvx = xv - mean;
                var = var + dvx * dvx;
            }
            var = var * inv_c;
            let rstd = T::one() / (var + epsv).sqrt();
            aux[v * 2] = mean;
            aux[v * 2 + 1] = rstd;
            let out = &mut data[v * c..(v + 1) * c];
            for j in 0..c {
                let xhat = (xs[j] - mean) * rstd;
                out[j] = self.nodes[gamma].data[j] * xhat + self.nodes[beta].data[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, shape, data, aux))
    }

    /// Mean over the batch of -log softmax(logits)[target]. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(PopError::invalid(format!(
                "cross_entropy got {} targets for batch {}",
                targets.len(),
                b
            )));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(PopError::invalid(format!(
                "cross_entropy target {t} at batch index {i} out of range for {c} classes"
            )));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &self.nodes[logits].data[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut denom = T::zero();
            let prow = &mut probs[i * c..(i + 1) * c];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - mx).exp();
                denom = denom + *p;
            }
            let inv = T::one() / denom;
            for p in prow.iter_mut() {
                *p = *p * inv;
            }
            let lse = mx + denom.ln();
            loss = loss + (lse - row[targets[i]]);
        }
        loss = loss / T::from_usize(b);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![],
            vec![loss],
            probs,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in &self.nodes[x].data {
            s = s + v;
        }
        self.push(Op::SumAll { x }, vec![], vec![s], Vec::new())
    }

    pub fn mean_seg_rows(&mut self, x: NodeId, batch: usize, m: usize) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "mean_seg_rows")?;
        if m == 0 || r != batch * m {
            return Err(PopError::invalid(format!(
                "mean_seg_rows: {r} rows incompatible with batch {batch} × segment {m}"
            )));
        }
        let inv = T::one() / T::from_usize(m);
        let mut data = vec![T::zero(); batch * d];
        for s in 0..batch {
            let out = &mut data[s * d..(s + 1) * d];
            for row in 0..m {
                let xs = &self.nodes[x].data[(s * m + row) * d..(s * m + row + 1) * d];
                kernels::add_assign(out, xs);
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        Ok(self.push(
            Op::MeanSegRows { x, batch, m, d },
            vec![batch, d],
            data,
            Vec::new(),
        ))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, batch: usize) -> Result<NodeId> {
        let (m, d) = self.dims2(x, "broadcast_rows")?;
        let mut data = Vec::with_capacity(batch * m * d);
        for _ in 0..batch {
            data.extend_from_slice(&self.nodes[x].data);
        }
        Ok(self.push(
            Op::BroadcastRows { x, batch, m, d },
            vec![batch * m, d],
            data,
            Vec::new(),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId], batch: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(PopError::invalid("concat_rows needs at least one part"));
        }
        let mut metas = Vec::with_capacity(parts.len());
        let mut d0 = None;
        for &p in parts {
            let (r, d) = self.dims2(p, "concat_rows")?;
            if r % batch != 0 {
                return Err(PopError::invalid(format!(
                    "concat_rows part with {r} rows not divisible by batch {batch}"
                )));
            }
            match d0 {
                None => d0 = Some(d),
                Some(dd) if dd == d => {}
                Some(dd) => {
                    return Err(PopError::ShapeMismatch {
                        op: "concat_rows",
                        left: vec![r, d],
                        right: vec![r, dd],
                    })
                }
            }
            metas.push((p, r / batch));
        }
        let d = d0.unwrap();
        let total: usize = metas.iter().map(|(_, m)| m).sum();
        let mut data = Vec::with_capacity(batch * total * d);
        for s in 0..batch {
            for &(p, m) in &metas {
                let xs = &self.nodes[p].data[s * m * d..(s + 1) * m * d];
                data.extend_from_slice(xs);
            }
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: metas,
                batch,
                d,
            },
            vec![batch * total, d],
            data,
            Vec::new(),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(PopError::invalid("concat_cols needs at least one part"));
        }
        let mut metas = Vec::with_capacity(parts.len());
        let mut rows0 = None;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            match rows0 {
                None => rows0 = Some(r),
                Some(rr) if rr == r => {}
                Some(rr) => {
                    return Err(PopError::ShapeMismatch {
                        op: "concat_cols",
                        left: vec![r, c],
                        right: vec![rr, c],
                    })
                }
            }
            metas.push((p, c));
        }
        let rows = rows0.unwrap();
        let total: usize = metas.iter().map(|(_, c)| c).sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for &(p, c) in &metas {
            for r in 0..rows {
                let src = &self.nodes[p].data[r * c..(r + 1) * c];
                data[r * total + off..r * total + off + c].copy_from_slice(src);
            }
            off += c;
        }
        Ok(self.push(
            Op::ConcatCols { parts: metas, rows },
            vec![rows, total],
            data,
            Vec::new(),
        ))
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        batch: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "slice_rows")?;
        if r % batch != 0 {
            return Err(PopError::invalid(format!(
                "slice_rows: {r} rows not divisible by batch {batch}"
            )));
        }
        let s_total = r / batch;
        if start + len > s_total || len == 0 {
            return Err(PopError::invalid(format!(
                "slice_rows range {start}..{} out of {s_total} rows per sample",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(batch * len * d);
        for s in 0..batch {
            let base = (s * s_total + start) * d;
            data.extend_from_slice(&self.nodes[x].data[base..base + len * d]);
        }
        Ok(self.push(
            Op::SliceRows {
                x,
                batch,
                s_total,
                start,
                len,
                d,
            },
            vec![batch * len, d],
            data,
            Vec::new(),
        ))
    }

    pub fn replace_rows(
        &mut self,
        x: NodeId,
        new: NodeId,
        batch: usize,
        start: usize,
    ) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "replace_rows")?;
        let (len, dn) = self.dims2(new, "replace_rows")?;
        if d != dn {
            return Err(PopError::ShapeMismatch {
                op: "replace_rows",
                left: vec![r, d],
                right: vec![len, dn],
            });
        }
        if r % batch != 0 {
            return Err(PopError::invalid(format!(
                "replace_rows: {r} rows not divisible by batch {batch}"
            )));
        }
        let s_total = r / batch;
        if start + len > s_total {
            return Err(PopError::invalid(format!(
                "replace_rows range {start}..{} out of {s_total} rows per sample",
                start + len
            )));
        }
        let mut data = self.nodes[x].data.clone();
        for s in 0..batch {
            let base = (s * s_total + start) * d;
            data[base..base + len * d].copy_from_slice(&self.nodes[new].data);
        }
        Ok(self.push(
            Op::ReplaceRows {
                x,
                new,
                batch,
                s_total,
                start,
                len,
                d,
            },
            vec![r, d],
            data,
            Vec::new(),
        ))
    }

    /// Multi-head scaled dot-product attention with full bidirectional
    /// attention over each sample's tokens.
    pub fn sdpa(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (r, d) = self.dims2(q, "sdpa")?;
        for (other, name) in [(k, "k"), (v, "v")] {
            if self.nodes[other].shape != [r, d] {
                return Err(PopError::invalid(format!(
                    "sdpa {name} shape {:?} differs from q {:?}",
                    self.nodes[other].shape, self.nodes[q].shape
                )));
            }
        }
        if batch == 0 || r % batch != 0 {
            return Err(PopError::invalid(format!(
                "sdpa: {r} rows not divisible by batch {batch}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(PopError::invalid(format!(
                "sdpa: width {d} not divisible by heads {heads}"
            )));
        }
        let seq = r / batch;
        let dh = d / heads;
        let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); r * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let qd = &self.nodes[q].data;
        let kd = &self.nodes[k].data;
        let vd = &self.nodes[v].data;
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let p_base = (b * heads + h) * seq * seq;
                // scores and row softmax
                for i in 0..seq {
                    let qrow = &qd[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    let prow = &mut probs[p_base + i * seq..p_base + (i + 1) * seq];
                    for (j, pv) in prow.iter_mut().enumerate() {
                        let krow = &kd[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        *pv = kernels::dot(qrow, krow) * alpha;
                    }
                    softmax_lane_contig(prow);
                }
                // out rows = P · V
                for i in 0..seq {
                    let orow = &mut out[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    let prow = &probs[p_base + i * seq..p_base + (i + 1) * seq];
                    for (j, &pv) in prow.iter().enumerate() {
                        let vrow = &vd[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        kernels::axpy(orow, pv, vrow);
                    }
                }
            }
        }
        Ok(self.push(
            Op::Sdpa {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            },
            vec![r, d],
            out,
            probs,
        ))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(PopError::ShapeMismatch {
                op: "max_elem",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let data: Vec<T> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::MaxElem { a, b }, shape, data, Vec::new()))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradients for every
    /// requires-grad node reachable from it; repeat calls recompute from
    /// scratch.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(PopError::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.wants(loss) {
            return Ok(());
        }
        self.grads[loss] = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.wants(id) {
            return;
        }
        let len = self.nodes[id].data.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn propagate(&mut self, id: NodeId, g: &[T]) {
        // Clone op metadata (cheap: ids and sizes) to decouple borrows.
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let bt = kernels::transpose(&self.nodes[b].data, k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    self.acc(a, |buf| kernels::add_assign(buf, &da));
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let at = kernels::transpose(&self.nodes[a].data, m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    self.acc(b, |buf| kernels::add_assign(buf, &db));
                }
            }
            Op::Add { a, b } => {
                self.acc(a, |buf| kernels::add_assign(buf, g));
                self.acc(b, |buf| kernels::add_assign(buf, g));
            }
            Op::AddRow { x, bias } => {
                self.acc(x, |buf| kernels::add_assign(buf, g));
                if self.wants(bias) {
                    let c = self.nodes[bias].data.len();
                    let rows = g.len() / c;
                    self.acc(bias, |buf| {
                        for r in 0..rows {
                            kernels::add_assign(buf, &g[r * c..(r + 1) * c]);
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                self.acc(x, |buf| kernels::axpy(buf, c, g));
            }
            Op::Gelu { x } => {
                if self.wants(x) {
                    let dx: Vec<T> = self.nodes[x]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gelu_grad(v) * gv)
                        .collect();
                    self.acc(x, |buf| kernels::add_assign(buf, &dx));
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(x) {
                    let shape = self.nodes[id].shape.clone();
                    let alen = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let p = &self.nodes[id].data;
                    let mut dx = vec![T::zero(); p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut inner_sum = T::zero();
                            for a in 0..alen {
                                let idx = base + a * inner;
                                inner_sum = inner_sum + g[idx] * p[idx];
                            }
                            for a in 0..alen {
                                let idx = base + a * inner;
                                dx[idx] = p[idx] * (g[idx] - inner_sum);
                            }
                        }
                    }
                    self.acc(x, |buf| kernels::add_assign(buf, &dx));
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let c = self.nodes[gamma].data.len();
                let vectors = self.nodes[x].data.len() / c;
                let inv_c = T::one() / T::from_usize(c);
                if self.wants(gamma) || self.wants(beta) || self.wants(x) {
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); self.nodes[x].data.len()];
                    for v in 0..vectors {
                        let mean = self.nodes[id].aux[v * 2];
                        let rstd = self.nodes[id].aux[v * 2 + 1];
                        let xs = &self.nodes[x].data[v * c..(v + 1) * c];
                        let gs = &g[v * c..(v + 1) * c];
                        // dxhat, plus the two reduction terms of the LN jacobian
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..c {
                            let xhat = (xs[j] - mean) * rstd;
                            let dxhat = gs[j] * self.nodes[gamma].data[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            dgamma[j] = dgamma[j] + gs[j] * xhat;
                            dbeta[j] = dbeta[j] + gs[j];
                        }
                        let mean_dxhat = sum_dxhat * inv_c;
                        let mean_dxhat_xhat = sum_dxhat_xhat * inv_c;
                        let out = &mut dx[v * c..(v + 1) * c];
                        for j in 0..c {
                            let xhat = (xs[j] - mean) * rstd;
                            let dxhat = gs[j] * self.nodes[gamma].data[j];
                            out[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.acc(x, |buf| kernels::add_assign(buf, &dx));
                    self.acc(gamma, |buf| kernels::add_assign(buf, &dgamma));
                    self.acc(beta, |buf| kernels::add_assign(buf, &dbeta));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(logits) {
                    let b = targets.len();
                    let c = self.nodes[logits].data.len() / b;
                    let scale = g[0] / T::from_usize(b);
                    let probs = self.nodes[id].aux.clone();
                    self.acc(logits, |buf| {
                        for i in 0..b {
                            for j in 0..c {
                                let onehot = if j == targets[i] { T::one() } else { T::zero() };
                                buf[i * c + j] = buf[i * c + j] + (probs[i * c + j] - onehot) * scale;
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.acc(x, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gv;
                    }
                });
            }
            Op::MeanSegRows { x, batch, m, d } => {
                if self.wants(x) {
                    let inv = T::one() / T::from_usize(m);
                    self.acc(x, |buf| {
                        for s in 0..batch {
                            let gs = &g[s * d..(s + 1) * d];
                            for row in 0..m {
                                let out = &mut buf[(s * m + row) * d..(s * m + row + 1) * d];
                                kernels::axpy(out, inv, gs);
                            }
                        }
                    });
                }
            }
            Op::BroadcastRows { x, batch, m, d } => {
                if self.wants(x) {
                    self.acc(x, |buf| {
                        for s in 0..batch {
                            kernels::add_assign(buf, &g[s * m * d..(s + 1) * m * d]);
                        }
                    });
                }
            }
            Op::ConcatRows { parts, batch, d } => {
                let total: usize = parts.iter().map(|(_, m)| m).sum();
                let mut off = 0;
                for (p, m) in parts {
                    if self.wants(p) {
                        self.acc(p, |buf| {
                            for s in 0..batch {
                                let src = &g[(s * total + off) * d..(s * total + off + m) * d];
                                kernels::add_assign(&mut buf[s * m * d..(s + 1) * m * d], src);
                            }
                        });
                    }
                    off += m;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut off = 0;
                for (p, c) in parts {
                    if self.wants(p) {
                        self.acc(p, |buf| {
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + c];
                                kernels::add_assign(&mut buf[r * c..(r + 1) * c], src);
                            }
                        });
                    }
                    off += c;
                }
            }
            Op::SliceRows {
                x,
                batch,
                s_total,
                start,
                len,
                d,
            } => {
                if self.wants(x) {
                    self.acc(x, |buf| {
                        for s in 0..batch {
                            let dst = &mut buf[(s * s_total + start) * d..][..len * d];
                            kernels::add_assign(dst, &g[s * len * d..(s + 1) * len * d]);
                        }
                    });
                }
            }
            Op::ReplaceRows {
                x,
                new,
                batch,
                s_total,
                start,
                len,
                d,
            } => {
                if self.wants(x) {
                    self.acc(x, |buf| {
                        for s in 0..batch {
                            for row in 0..s_total {
                                if row >= start && row < start + len {
                                    continue; // replaced rows: no gradient to x
                                }
                                let idx = (s * s_total + row) * d;
                                kernels::add_assign(&mut buf[idx..idx + d], &g[idx..idx + d]);
                            }
                        }
                    });
                }
                if self.wants(new) {
                    self.acc(new, |buf| {
                        for s in 0..batch {
                            let src = &g[(s * s_total + start) * d..][..len * d];
                            kernels::add_assign(buf, src);
                        }
                    });
                }
            }
            Op::Sdpa {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            } => {
                let d = self.nodes[q].shape[1];
                let dh = d / heads;
                let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
                let qd = &self.nodes[q].data;
                let kd = &self.nodes[k].data;
                let vd = &self.nodes[v].data;
                let probs = &self.nodes[id].aux;
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); seq * seq];
                let mut ds = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        let p_base = (b * heads + h) * seq * seq;
                        let row = |m: &[T], j: usize| -> std::ops::Range<usize> {
                            let _ = m;
                            (b * seq + j) * d + col..(b * seq + j) * d + col + dh
                        };
                        // dV[j] += Σ_i P[i,j]·dO[i];  dP[i,j] = dO[i]·V[j]
                        for i in 0..seq {
                            let go = &g[row(g, i)];
                            for j in 0..seq {
                                let p_ij = probs[p_base + i * seq + j];
                                kernels::axpy(&mut dv[row(vd, j)], p_ij, go);
                                dp[i * seq + j] = kernels::dot(go, &vd[row(vd, j)]);
                            }
                        }
                        // softmax jacobian per row
                        for i in 0..seq {
                            let prow = &probs[p_base + i * seq..p_base + (i + 1) * seq];
                            let dprow = &dp[i * seq..(i + 1) * seq];
                            let mut inner = T::zero();
                            for j in 0..seq {
                                inner = inner + dprow[j] * prow[j];
                            }
                            let dsrow = &mut ds[i * seq..(i + 1) * seq];
                            for j in 0..seq {
                                dsrow[j] = prow[j] * (dprow[j] - inner);
                            }
                        }
                        // dQ[i] += α Σ_j dS[i,j]·K[j];  dK[j] += α Σ_i dS[i,j]·Q[i]
                        for i in 0..seq {
                            for j in 0..seq {
                                let c = alpha * ds[i * seq + j];
                                kernels::axpy(&mut dq[row(qd, i)], c, &kd[row(kd, j)]);
                                kernels::axpy(&mut dk[row(kd, j)], c, &qd[row(qd, i)]);
                            }
                        }
                    }
                }
                self.acc(q, |buf| kernels::add_assign(buf, &dq));
                self.acc(k, |buf| kernels::add_assign(buf, &dk));
                self.acc(v, |buf| kernels::add_assign(buf, &dv));
            }
            Op::MaxElem { a, b } => {
                let av = self.nodes[a].data.clone();
                let bv = self.nodes[b].data.clone();
                self.acc(a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] >= bv[i] {
                            buf[i] = buf[i] + g[i];
                        }
                    }
                });
                self.acc(b, |buf| {
                    for i in 0..buf.len() {
                        if av[i] < bv[i] {
                            buf[i] = buf[i] + g[i];
                        }
                    }
                });
            }
        }
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    // x · Φ(x) with the exact Gaussian CDF
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * half).exp();
    phi_cdf + x * pdf
}

/// Stable softmax over a strided lane, in place.
fn softmax_lane<T: Scalar>(data: &mut [T], base: usize, alen: usize, stride: usize) {
    let mut mx = data[base];
    for a in 1..alen {
        mx = mx.max(data[base + a * stride]);
    }
    let mut denom = T::zero();
    for a in 0..alen {
        let e = (data[base + a * stride] - mx).exp();
        data[base + a * stride] = e;
        denom = denom + e;
    }
    let inv = T::one() / denom;
    for a in 0..alen {
        data[base + a * stride] = data[base + a * stride] * inv;
    }
}

fn softmax_lane_contig<T: Scalar>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut denom = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        denom = denom + *v;
    }
    let inv = T::one() / denom;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::<f64>::new();
        let eye = tape
            .leaf(
                vec![3, 3],
                vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
                false,
            )
            .unwrap();
        let b_vals: Vec<f64> = (0..9).map(|v| v as f64 * 0.7 - 2.0).collect();
        let b = tape.leaf(vec![3, 3], b_vals.clone(), false).unwrap();
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), &b_vals[..]);
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![1, 1], vec![2.0], false).unwrap();
        let b = tape.leaf(vec![1, 1], vec![3.0], false).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = tape.leaf(vec![4, 2], vec![0.0; 8], false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3], vec![0.0, 0.0, 0.0], false).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let y = tape.leaf(vec![2], vec![1000.0, 0.0], false).unwrap();
        let sy = tape.softmax(y, 0).unwrap();
        assert!(close(tape.value(sy)[0], 1.0, 1e-12));
        assert!(close(tape.value(sy)[1], 0.0, 1e-12));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2], vec![f64::NAN, 0.0], false).unwrap();
        assert!(tape.softmax(x, 0).is_err());
    }

    #[test]
    fn softmax_matches_reference_formula() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..9).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![9], xs.clone(), false).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        let denom: f64 = xs.iter().map(|v| v.exp()).sum();
        for (got, v) in tape.value(s).iter().zip(&xs) {
            assert!(close(*got, v.exp() / denom, 1e-12));
        }
    }

    #[test]
    fn layer_norm_constant_vector_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1, 4], vec![5.0; 4], false).unwrap();
        let gamma = tape.leaf(vec![4], vec![1.0; 4], false).unwrap();
        let beta = tape.leaf(vec![4], vec![0.0; 4], false).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }
        // gamma = 0 -> output equals beta
        let g0 = tape.leaf(vec![4], vec![0.0; 4], false).unwrap();
        let b7 = tape.leaf(vec![4], vec![7.0; 4], false).unwrap();
        let x2 = tape.leaf(vec![2, 4], (0..8).map(|v| v as f64).collect(), false).unwrap();
        let y2 = tape.layer_norm(x2, g0, b7, 1e-5).unwrap();
        for &v in tape.value(y2) {
            assert!(close(v, 7.0, 1e-12));
        }
    }

    #[test]
    fn layer_norm_moments() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let c = 32;
        let xs: Vec<f64> = (0..3 * c).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3, c], xs, false).unwrap();
        let gamma = tape.leaf(vec![c], vec![1.0; c], false).unwrap();
        let beta = tape.leaf(vec![c], vec![0.0; c], false).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in 0..3 {
            let row = &tape.value(y)[v * c..(v + 1) * c];
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / c as f64;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3], vec![0.0, 10.0, -10.0], false).unwrap();
        let y = tape.gelu(x);
        let got = tape.value(y);
        assert_eq!(got[0], 0.0);
        assert!(close(got[1], 10.0, 1e-6));
        assert!(got[2].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(vec![2, 4], vec![0.3; 8], false).unwrap();
        let loss = tape.cross_entropy(logits, &[1, 3]).unwrap();
        assert!(close(tape.value(loss)[0], (4.0f64).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_confident_margin() {
        let mut tape = Tape::<f64>::new();
        let logits = tape
            .leaf(vec![1, 3], vec![20.0, 0.0, 0.0], false)
            .unwrap();
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss)[0] <= 1e-8);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let err = tape.cross_entropy(logits, &[0, 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn cross_entropy_matches_per_sample_reference() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (b, c) = (5, 7);
        let logits: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut reference = 0.0;
        for i in 0..b {
            let row = &logits[i * c..(i + 1) * c];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            reference += -(row[targets[i]].exp() / denom).ln();
        }
        reference /= b as f64;
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(vec![b, c], logits, false).unwrap();
        let loss = tape.cross_entropy(l, &targets).unwrap();
        assert!(close(tape.value(loss)[0], reference, 1e-6));
    }

    #[test]
    fn backward_of_sum_is_ones_and_independents_get_none() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2, 3], vec![0.5; 6], true).unwrap();
        let unused = tape.leaf(vec![4], vec![1.0; 4], true).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_accumulates_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let frozen = tape.leaf(vec![2, 2], vec![1.0; 4], false).unwrap();
        let live = tape.leaf(vec![2, 2], vec![2.0; 4], true).unwrap();
        let prod = tape.matmul(frozen, live).unwrap();
        let s = tape.sum_all(prod);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(live).is_some());
    }

    #[test]
    fn concat_slice_round_trip_and_grads() {
        let mut tape = Tape::<f64>::new();
        // batch 2, parts of 1 and 2 rows per sample, d = 2
        let a = tape
            .leaf(vec![2, 2], vec![1., 2., 3., 4.], true)
            .unwrap();
        let b = tape
            .leaf(vec![4, 2], vec![10., 20., 30., 40., 50., 60., 70., 80.], true)
            .unwrap();
        let cat = tape.concat_rows(&[a, b], 2).unwrap();
        assert_eq!(
            tape.value(cat),
            &[1., 2., 10., 20., 30., 40., 3., 4., 50., 60., 70., 80.]
        );
        let sl = tape.slice_rows(cat, 2, 1, 2).unwrap();
        assert_eq!(tape.value(sl), tape.value(b));
        let s = tape.sum_all(sl);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none() || tape.grad(a).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn broadcast_rows_sums_gradient_over_samples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2, 3], vec![1.0; 6], true).unwrap();
        let b = tape.broadcast_rows(x, 4).unwrap();
        assert_eq!(tape.shape(b), &[8, 3]);
        let s = tape.sum_all(b);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 6]);
    }

    #[test]
    fn replace_rows_blocks_gradient_to_replaced_slot() {
        let mut tape = Tape::<f64>::new();
        // batch 2, 3 rows per sample, d 2; replace row 1
        let x = tape.leaf(vec![6, 2], (0..12).map(|v| v as f64).collect(), true).unwrap();
        let fresh = tape.leaf(vec![1, 2], vec![100.0, 200.0], true).unwrap();
        let y = tape.replace_rows(x, fresh, 2, 1).unwrap();
        assert_eq!(tape.value(y)[2], 100.0);
        assert_eq!(tape.value(y)[8], 100.0);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        let gx = tape.grad(x).unwrap();
        assert_eq!(gx, &[1., 1., 0., 0., 1., 1., 1., 1., 0., 0., 1., 1.]);
        assert_eq!(tape.grad(fresh).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn max_elem_is_left_biased_and_dominant() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(vec![3], vec![1.0, 5.0, 2.0], true).unwrap();
        let b = tape.leaf(vec![3], vec![1.0, 3.0, 4.0], true).unwrap();
        let m = tape.max_elem(a, b).unwrap();
        assert_eq!(tape.value(m), &[1.0, 5.0, 4.0]);
        let s = tape.sum_all(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sdpa_rows_are_convex_weights() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (batch, seq, d, heads) = (2, 5, 8, 2);
        let mut tape = Tape::<f32>::new();
        let data = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            (0..batch * seq * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let q = tape.leaf(vec![batch * seq, d], data(&mut rng), false).unwrap();
        let k = tape.leaf(vec![batch * seq, d], data(&mut rng), false).unwrap();
        let v = tape.leaf(vec![batch * seq, d], data(&mut rng), false).unwrap();
        let o = tape.sdpa(q, k, v, batch, heads).unwrap();
        let (probs, nb, nh, s) = tape.attention_probs(o).unwrap();
        assert_eq!((nb, nh, s), (batch, heads, seq));
        for row in probs.chunks(seq) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-5);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }
}
