//! KAN-augmented Conformer ("Kanformer") for bonafide-vs-spoof
//! classification over precomputed feature sequences.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`] / [`tape`] / [`params`] — dense f64 tensors with tape-based
//!   reverse-mode automatic differentiation and named parameter storage;
//! - [`kan`] — Kolmogorov-Arnold layers (Chebyshev and B-spline variants)
//!   and Kolmogorov-Arnold convolutions;
//! - [`model`] — the Kanformer encoder blocks, CLS-token encoder, feature
//!   projection, and classification head, each sub-module switchable
//!   between its baseline and KAN variant;
//! - [`pipeline`] (`data` + `train`) — feature/label ingestion, a synthetic
//!   toy task, the Adam training loop with early stopping and top-k
//!   checkpoint tracking, and checkpoint persistence;
//! - [`metrics`] — equal error rate and minimum normalized tandem
//!   detection cost over score sets;
//! - [`cli`] — the `kanformer` binary: `gen-data`, `train`, `eval`,
//!   `gradcheck`, `ablate`.

// Training allocates and frees many multi-megabyte activation buffers per
// batch; mimalloc keeps those out of the mmap slow path.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
