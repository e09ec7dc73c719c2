//! Selective state-space scan with a deformable, context-adaptive read path.
//!
//! The crate is organized around a small dense-`f64` tensor engine with
//! reverse-mode differentiation (`tensor`), the recurrent write pass and its
//! three interchangeable scan algorithms (`scan`), the offset-predicting read
//! pass (`casf`), the full vision block and hierarchical backbone (`block`),
//! the multi-view BEV cross-attention variant (`xa`), an analytic cost model
//! (`complexity`), and the check suites behind the `deformba` CLI (`harness`).
//!
//! Everything is deterministic: fixed reduction orders, seeded init, no
//! threading inside numeric kernels. Two runs with the same seed and config
//! produce bitwise-identical tensors.

pub mod block;
pub mod casf;
pub mod complexity;
pub mod harness;
pub mod scan;
pub mod tensor;
pub mod xa;

pub use tensor::{Tensor, TensorError};

/// Crate version baked into reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
