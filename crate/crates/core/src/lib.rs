//! Continual-learning core: a small tape-based autodiff engine, a prompt-
//! augmented vision transformer, prompt pools with feature fusion, the
//! three-part training objective, and the class-incremental protocol driver.
//!
//! Everything is deterministic given a seed: RNG streams are derived from
//! (seed, stage-tag) pairs, reductions run in fixed order, and training
//! never consults wall-clock time.

pub mod checkpoint;
pub mod data;
pub mod driver;
pub mod error;
pub mod objective;
pub mod param;
pub mod prompts;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod vit;

pub use driver::{ContinualState, MemoryBuffer, MetricLog, RunConfig, Schedule, TaskSpec};
pub use error::{PopError, Result};
pub use objective::{HeadSet, LossWeights};
pub use param::{Optimizer, ParamStore, StepBindings};
pub use prompts::{FusionMethod, PromptStore};
pub use scalar::{Dtype, Precision, Scalar};
pub use tensor::{AdamConfig, AdamState, NodeId, Tape, Tensor};
pub use vit::{BackboneConfig, PromptMode, Vit};
