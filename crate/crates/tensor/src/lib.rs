//! A deliberately small reverse-mode autodiff engine.
//!
//! Every tensor is a dense `[n, c, h, w]` array of `f64`. A [`Tape`] records
//! operations as they are evaluated and replays them backwards to produce
//! gradients for every parameter and every leaf input. A tape can also run
//! in *dry* mode, where only shapes are propagated; the per-op records it
//! collects are what the complexity profiler consumes.

mod gemm;
pub mod gradcheck;
pub mod init;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, OpKind, OpRecord, Tape, Var};
pub use tensor::{Shape, Tensor};
