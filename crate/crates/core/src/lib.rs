//! Adversarial entropy semi-supervised learning on second-order pooled features.
//!
//! The crate is `no_std` (with `alloc`): it holds the numerical core only.
//! File formats, the command-line driver and timing live in the `sopssl`
//! companion crate.
//!
//! Module map:
//! - [`tensor`]: dense tensors and the reverse-mode [`tensor::Tape`].
//! - [`param`]: trainable parameters partitioned into feature-extractor and classifier groups.
//! - [`sop`]: covariance pooling with Newton-Schulz square-root normalization.
//! - [`model`]: feature extractor, gradient reversal, normalized classifier, losses.
//! - [`train`]: the min/max entropy training loop, baselines and sweeps.
//! - [`data`]: synthetic datasets whose classes differ only in part co-occurrence.
//! - [`oracle`]: independent checks (Jacobi eigensolver, finite differences, update oracle).
#![no_std]
// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod model;
pub mod oracle;
pub mod param;
pub mod sop;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
