//! Seeded synthetic benchmark: oriented sinusoid gratings with disjoint
//! pretraining and continual-learning class pools.
//!
//! Every class is one cell of a fixed parameter grid (orientation ×
//! frequency, plus a color-tint cue), so class identity is controlled and
//! the two pools can never overlap. Samples jitter the cell parameters,
//! randomize phase, and add Gaussian pixel noise. Generation is a pure
//! function of the spec: per-class RNG streams plus canonical class-major
//! output order make repeated runs byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PopError, Result};
use crate::rng::stream;

const MAGIC: &[u8; 8] = b"POPDATA1";

/// Distinct base orientations in [0, π).
const ORIENTATIONS: usize = 10;
/// Distinct base frequencies (cycles across the image).
const FREQUENCIES: [f64; 4] = [3.0, 4.5, 6.0, 7.5];
/// Per-channel grating amplitudes, one triple per tint family.
const TINTS: [[f64; 3]; 3] = [
    [0.35, 0.18, 0.08],
    [0.08, 0.35, 0.18],
    [0.18, 0.08, 0.35],
];

/// Largest class count the parameter grid can keep pairwise distinct:
/// (orientation, frequency) cells recur every 40 ids, but the tint cue
/// then differs, so ids 0..120 are unique.
pub const CLASS_CAPACITY: usize = ORIENTATIONS * FREQUENCIES.len() * TINTS.len();

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub channels: usize,
    pub pretrain_classes: usize,
    pub cl_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise_std: f64,
    /// Scale on per-sample orientation/frequency/phase jitter; 0 freezes
    /// every sample of a class to the class prototype.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_size: 32,
            channels: 3,
            pretrain_classes: 20,
            cl_classes: 20,
            train_per_class: 200,
            test_per_class: 50,
            noise_std: 0.05,
            jitter: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.channels == 0 {
            return Err(PopError::config("image size and channels must be positive"));
        }
        if self.channels != 3 {
            return Err(PopError::config(format!(
                "generator produces 3-channel images, got {}",
                self.channels
            )));
        }
        if self.pretrain_classes + self.cl_classes > CLASS_CAPACITY {
            return Err(PopError::config(format!(
                "{} + {} classes exceed the parameter-grid capacity of {CLASS_CAPACITY}",
                self.pretrain_classes, self.cl_classes
            )));
        }
        if self.pretrain_classes == 0 || self.cl_classes == 0 {
            return Err(PopError::config("both class pools must be non-empty"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(PopError::config("per-class sample counts must be positive"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(PopError::config("noise std must be finite and non-negative"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(PopError::config("jitter must be finite and non-negative"));
        }
        Ok(())
    }

    /// Global id of the first continual-learning class.
    pub fn cl_base(&self) -> usize {
        self.pretrain_classes
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// One sample: HWC row-major pixels in [0, 1], a global class id, and the
/// originating task (0 = pretraining pool, 1-based for CL tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub class_id: usize,
    pub task_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSet {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: DatasetSpec,
    pub pretrain: SplitSet,
    pub cl: SplitSet,
}

/// Class prototype: one grid cell.
#[derive(Debug, Clone, Copy)]
struct ClassParams {
    theta: f64,
    freq: f64,
    amps: [f64; 3],
}

fn class_params(class_id: usize) -> ClassParams {
    let orient = class_id % ORIENTATIONS;
    let freq = (class_id / ORIENTATIONS) % FREQUENCIES.len();
    let tint = class_id % TINTS.len();
    ClassParams {
        theta: std::f64::consts::PI * orient as f64 / ORIENTATIONS as f64,
        freq: FREQUENCIES[freq],
        amps: TINTS[tint],
    }
}

fn render_class_samples(
    spec: &DatasetSpec,
    class_id: usize,
    split: &str,
    count: usize,
) -> Vec<LabeledImage> {
    let mut rng = stream(spec.seed, &format!("data/class/{class_id}/{split}"));
    let noise = Normal::new(0.0f64, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let p = class_params(class_id);
    let s = spec.image_size;
    let jitter = spec.jitter;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU) * jitter.min(1.0);
        let dtheta = if jitter > 0.0 {
            rng.gen_range(-0.05..0.05) * jitter
        } else {
            0.0
        };
        let dfreq = if jitter > 0.0 {
            rng.gen_range(-0.12..0.12) * jitter
        } else {
            0.0
        };
        let theta = p.theta + dtheta;
        let freq = p.freq + dfreq;
        let (ct, st) = (theta.cos(), theta.sin());
        let mut pixels = Vec::with_capacity(spec.pixels_per_image());
        for i in 0..s {
            for j in 0..s {
                let u = i as f64 / s as f64;
                let v = j as f64 / s as f64;
                let wave = (std::f64::consts::TAU * freq * (u * ct + v * st) + phase).sin();
                for c in 0..3 {
                    let eps = if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    let value = 0.5 + p.amps[c] * wave + eps;
                    pixels.push(value.clamp(0.0, 1.0) as f32);
                }
            }
        }
        out.push(LabeledImage {
            pixels,
            class_id,
            task_id: 0,
        });
    }
    out
}

/// Generate both pools. Output order is canonical: class-major ascending,
/// sample index minor, train and test kept separate.
pub fn generate(spec: &DatasetSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut pretrain = SplitSet::default();
    let mut cl = SplitSet::default();
    for class_id in 0..spec.pretrain_classes + spec.cl_classes {
        let bucket = if class_id < spec.cl_base() {
            &mut pretrain
        } else {
            &mut cl
        };
        bucket
            .train
            .extend(render_class_samples(spec, class_id, "train", spec.train_per_class));
        bucket
            .test
            .extend(render_class_samples(spec, class_id, "test", spec.test_per_class));
    }
    Ok(Benchmark {
        spec: spec.clone(),
        pretrain,
        cl,
    })
}

/// Contiguous equal-size class blocks, task order fixed by class id.
/// Task ids are 1-based; task 1 holds the lowest CL class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
}

pub fn split_tasks(spec: &DatasetSpec, tasks: usize) -> Result<Vec<TaskSplit>> {
    if tasks == 0 {
        return Err(PopError::config("task count must be positive"));
    }
    if !spec.cl_classes.is_multiple_of(tasks) {
        return Err(PopError::config(format!(
            "{} CL classes not divisible into {tasks} tasks",
            spec.cl_classes
        )));
    }
    let per = spec.cl_classes / tasks;
    Ok((0..tasks)
        .map(|t| TaskSplit {
            task_id: t + 1,
            class_ids: (0..per).map(|c| spec.cl_base() + t * per + c).collect(),
        })
        .collect())
}

/// Plain-text task manifest: one `task <id>: <class ids>` line per task.
pub fn split_manifest(splits: &[TaskSplit]) -> String {
    let mut out = String::new();
    for s in splits {
        out.push_str(&format!(
            "task {}: {}\n",
            s.task_id,
            s.class_ids
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    out
}

/// Stamp origin task ids onto the CL pool according to a split.
pub fn assign_task_ids(cl: &mut SplitSet, splits: &[TaskSplit]) {
    let task_of = |class_id: usize| -> usize {
        splits
            .iter()
            .find(|s| s.class_ids.contains(&class_id))
            .map(|s| s.task_id)
            .unwrap_or(0)
    };
    for img in cl.train.iter_mut().chain(cl.test.iter_mut()) {
        img.task_id = task_of(img.class_id);
    }
}

// ── Container IO ─────────────────────────────────────────────────────────

fn write_split(w: &mut impl Write, split: &SplitSet, pixels: usize) -> Result<()> {
    for (name, samples) in [("train", &split.train), ("test", &split.test)] {
        w.write_all(&(samples.len() as u64).to_le_bytes())?;
        for img in samples.iter() {
            if img.pixels.len() != pixels {
                return Err(PopError::format(format!(
                    "{name} sample of class {} has {} pixels, expected {pixels}",
                    img.class_id,
                    img.pixels.len()
                )));
            }
            w.write_all(&(img.class_id as u64).to_le_bytes())?;
            w.write_all(&(img.task_id as u64).to_le_bytes())?;
            for &p in &img.pixels {
                w.write_all(&p.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_split(r: &mut impl Read, pixels: usize) -> Result<SplitSet> {
    let mut split = SplitSet::default();
    for part in 0..2 {
        let count = read_u64(r, "sample count")? as usize;
        let bucket = if part == 0 {
            &mut split.train
        } else {
            &mut split.test
        };
        for _ in 0..count {
            let class_id = read_u64(r, "class id")? as usize;
            let task_id = read_u64(r, "task id")? as usize;
            let mut raw = vec![0u8; pixels * 4];
            read_exact(r, &mut raw, "pixel data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|p| !p.is_finite()) {
                return Err(PopError::NonFinite("dataset pixels"));
            }
            bucket.push(LabeledImage {
                pixels: data,
                class_id,
                task_id,
            });
        }
    }
    Ok(split)
}

/// Serialize a benchmark to its container encoding.
pub fn write_container(bench: &Benchmark, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let spec_bytes = serde_json::to_vec(&bench.spec)
        .map_err(|e| PopError::format(format!("dataset spec serialization: {e}")))?;
    w.write_all(&(spec_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&spec_bytes)?;
    let pixels = bench.spec.pixels_per_image();
    write_split(w, &bench.pretrain, pixels)?;
    write_split(w, &bench.cl, pixels)?;
    Ok(())
}

pub fn read_container(r: &mut impl Read) -> Result<Benchmark> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(PopError::format(format!(
            "not a dataset container: bad magic {magic:?}"
        )));
    }
    let spec_len = read_u64(r, "spec length")? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    read_exact(r, &mut spec_bytes, "spec")?;
    let spec: DatasetSpec = serde_json::from_slice(&spec_bytes)
        .map_err(|e| PopError::format(format!("dataset spec parse: {e}")))?;
    spec.validate()?;
    let pixels = spec.pixels_per_image();
    let pretrain = read_split(r, pixels)?;
    let cl = read_split(r, pixels)?;
    Ok(Benchmark {
        spec,
        pretrain,
        cl,
    })
}

pub fn save(bench: &Benchmark, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(bench, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Benchmark> {
    read_container(&mut BufReader::new(File::open(path)?))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| PopError::format(format!("dataset container truncated reading {what}")))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
