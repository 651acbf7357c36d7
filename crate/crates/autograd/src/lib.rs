//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! The engine is deliberately small: a [`Tape`] records an eager forward
//! computation as a flat list of nodes, and [`Tape::backward`] walks the list
//! in reverse accumulating gradients. Everything is generic over [`Scalar`]
//! so the same model code runs in `f32` for training and in `f64` for
//! finite-difference gradient verification.
//!
//! Tensors are plain `ndarray::Array2` values. Batched sequences and feature
//! maps are stored row-major with explicit geometry carried by the ops that
//! need it (attention, convolutions, patch assembly), which keeps the tape
//! uniform and every inner loop a BLAS call.

// Force the BLAS provider to be linked.
extern crate blas_src;

mod blas;
mod init;
mod optim;
mod scalar;
mod sched;
mod tape;

pub use blas::ensure_blas_kernel;
pub use init::{trunc_normal, NormalSampler};
pub use optim::AdamW;
pub use scalar::Scalar;
pub use sched::{cosine_between, linear_between, warmup_cosine};
pub use tape::{MapGeom, Tape, Var};
