//! Central finite-difference validation of every tape op's backward pass.
//!
//! Each graph below is rebuilt from scratch for every ±h probe, so the
//! numeric gradient is independent of the backward implementation it
//! checks. Everything runs in f64; truncation error of the central
//! difference is ~h², far below the pass tolerance.

use crate::error::Result;
use crate::rng::stream;
use crate::tensor::tape::{NodeId, Tape};
use rand::Rng;

/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-5;

const H_BASE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub graph: &'static str,
    pub max_rel_err: f64,
    pub evals: usize,
}

type Build = fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>;

struct GraphSpec {
    name: &'static str,
    leaves: Vec<(Vec<usize>, Vec<f64>)>,
    build: Build,
}

/// Contract a matrix to a scalar through fixed rank-one weights so every
/// element of `x` receives a distinct gradient (catches index and
/// transposition mistakes that a plain sum would mask).
fn pinch(t: &mut Tape<f64>, x: NodeId) -> Result<NodeId> {
    let (r, c) = (t.shape(x)[0], t.shape(x)[1]);
    let lw: Vec<f64> = (0..r)
        .map(|i| (0.4 + 0.31 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let rw: Vec<f64> = (0..c)
        .map(|j| (0.7 + 0.23 * j as f64) * if j % 3 == 0 { -1.0 } else { 1.0 })
        .collect();
    let left = t.leaf(vec![1, r], lw, false)?;
    let right = t.leaf(vec![c, 1], rw, false)?;
    let y = t.matmul(left, x)?;
    let y = t.matmul(y, right)?;
    Ok(t.sum_all(y))
}

fn dense_gelu_chain(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    let [x, w, b, u] = [l[0], l[1], l[2], l[3]];
    let h = t.matmul(x, w)?;
    let h = t.add_row(h, b)?;
    let g = t.gelu(h);
    let s = t.add(g, u)?;
    let s = t.scale(s, 0.7);
    pinch(t, s)
}

fn softmax_both_axes(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    let x = l[0];
    let rows = t.softmax(x, 1)?;
    let cols = t.softmax(x, 0)?;
    let a = pinch(t, rows)?;
    let b = pinch(t, cols)?;
    t.add(a, b)
}

fn layer_norm_graph(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    let y = t.layer_norm(l[0], l[1], l[2], 1e-5)?;
    pinch(t, y)
}

fn cross_entropy_mlp(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    let [x, w1, b1, w2, b2] = [l[0], l[1], l[2], l[3], l[4]];
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.gelu(h);
    let logits = t.matmul(h, w2)?;
    let logits = t.add_row(logits, b2)?;
    let batch = t.shape(logits)[0];
    let classes = t.shape(logits)[1];
    let targets: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    t.cross_entropy(logits, &targets)
}

fn segment_ops(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    // batch 3, 2 base rows + 2 broadcast prompt rows per sample, d = 4
    let [x, p, fresh] = [l[0], l[1], l[2]];
    let pb = t.broadcast_rows(p, 3)?;
    let cat = t.concat_rows(&[x, pb], 3)?;
    let rep = t.replace_rows(cat, fresh, 3, 1)?;
    let prompt_seg = t.slice_rows(rep, 3, 2, 2)?;
    let f1 = t.mean_seg_rows(prompt_seg, 3, 2)?;
    let head_seg = t.slice_rows(rep, 3, 0, 1)?;
    let f2 = t.mean_seg_rows(head_seg, 3, 1)?;
    let fused = t.concat_cols(&[f1, f2])?;
    pinch(t, fused)
}

fn sdpa_graph(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    let o = t.sdpa(l[0], l[1], l[2], 2, 2)?;
    pinch(t, o)
}

fn max_elem_graph(t: &mut Tape<f64>, l: &[NodeId]) -> Result<NodeId> {
    let m = t.max_elem(l[0], l[1])?;
    pinch(t, m)
}

#[allow(clippy::vec_init_then_push)] // one graph per block, in check order
fn specs(seed: u64) -> Vec<GraphSpec> {
    let mut rng = stream(seed, "gradcheck");
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    };
    let mut out = Vec::new();
    out.push(GraphSpec {
        name: "dense_gelu_chain",
        leaves: vec![
            (vec![4, 6], draw(24)),
            (vec![6, 5], draw(30)),
            (vec![5], draw(5)),
            (vec![4, 5], draw(20)),
        ],
        build: dense_gelu_chain,
    });
    out.push(GraphSpec {
        name: "softmax_both_axes",
        leaves: vec![(vec![3, 7], draw(21))],
        build: softmax_both_axes,
    });
    out.push(GraphSpec {
        name: "layer_norm",
        leaves: vec![
            (vec![5, 8], draw(40)),
            (vec![8], draw(8)),
            (vec![8], draw(8)),
        ],
        build: layer_norm_graph,
    });
    out.push(GraphSpec {
        name: "cross_entropy_mlp",
        leaves: vec![
            (vec![6, 10], draw(60)),
            (vec![10, 8], draw(80)),
            (vec![8], draw(8)),
            (vec![8, 4], draw(32)),
            (vec![4], draw(4)),
        ],
        build: cross_entropy_mlp,
    });
    out.push(GraphSpec {
        name: "segment_ops",
        leaves: vec![
            (vec![6, 4], draw(24)),
            (vec![2, 4], draw(8)),
            (vec![1, 4], draw(4)),
        ],
        build: segment_ops,
    });
    out.push(GraphSpec {
        name: "sdpa",
        leaves: vec![
            (vec![6, 6], draw(36)),
            (vec![6, 6], draw(36)),
            (vec![6, 6], draw(36)),
        ],
        build: sdpa_graph,
    });
    // max has a kink where operands tie; keep them separated by more than
    // any probe step so the difference quotient stays one-sided.
    let a = draw(15);
    let b: Vec<f64> = a
        .iter()
        .enumerate()
        .map(|(i, &v)| v + if i % 2 == 0 { 0.4 + 0.05 * i as f64 } else { -0.4 - 0.05 * i as f64 })
        .collect();
    out.push(GraphSpec {
        name: "max_elem",
        leaves: vec![(vec![3, 5], a), (vec![3, 5], b)],
        build: max_elem_graph,
    });
    out
}

fn eval(spec: &GraphSpec, leaf: usize, elem: usize, delta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(spec.leaves.len());
    for (i, (shape, data)) in spec.leaves.iter().enumerate() {
        let mut d = data.clone();
        if i == leaf {
            d[elem] += delta;
        }
        ids.push(tape.leaf(shape.clone(), d, false)?);
    }
    let loss = (spec.build)(&mut tape, &ids)?;
    Ok(tape.value(loss)[0])
}

fn run_spec(spec: &GraphSpec) -> Result<FdReport> {
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(spec.leaves.len());
    for (shape, data) in &spec.leaves {
        ids.push(tape.leaf(shape.clone(), data.clone(), true)?);
    }
    let loss = (spec.build)(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&spec.leaves)
        .map(|(&id, (_, data))| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; data.len()])
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut evals = 0usize;
    for (li, (_, data)) in spec.leaves.iter().enumerate() {
        for e in 0..data.len() {
            let h = H_BASE * data[e].abs().max(1.0);
            let fp = eval(spec, li, e, h)?;
            let fm = eval(spec, li, e, -h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let ana = analytic[li][e];
            let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            evals += 1;
        }
    }
    Ok(FdReport {
        graph: spec.name,
        max_rel_err: max_rel,
        evals,
    })
}

/// Run the finite-difference check over graphs that jointly exercise every
/// tape op. Returns one report per graph.
pub fn check_all(seed: u64) -> Result<Vec<FdReport>> {
    specs(seed).iter().map(run_spec).collect()
}
