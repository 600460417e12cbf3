//! Auto-aligned transformer for part-based image retrieval.
//!
//! A vision transformer whose extra "part tokens" each attend to a subset of
//! image patches. The patch-to-part assignment is computed online per layer
//! and per head by entropic optimal transport (Sinkhorn scaling) over the
//! part-token queries and patch keys, then rounded to a hard partition.
//! Training combines per-token label-smoothed cross-entropy with batch-hard
//! triplet losses on the global (CLS) and concatenated part features.
//!
//! Everything is built from scratch on a small f64 autodiff core so that each
//! mechanism is checkable: gradients against finite differences, transport
//! plans against converged Sinkhorn marginals, masked attention against
//! brute-force recomputation, and retrieval metrics against exhaustive
//! oracles. A synthetic-identity dataset plus the training/eval harness make
//! the whole pipeline runnable on a desktop CPU.

pub mod attention;
pub mod harness;
pub mod loss;
pub mod model;
pub mod sinkhorn;
pub mod tensor;

pub use tensor::{ParameterStore, Tensor, TensorError};
