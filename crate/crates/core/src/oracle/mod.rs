//! Independent ground truth for the pipeline.
//!
//! The dense linear algebra here works on plain row-major slices with its own
//! kernels; nothing in [`linalg`] touches [`crate::tensor`].

pub mod gradcheck;
pub mod linalg;
mod update;

pub use gradcheck::{finite_diff_grad, model_gradcheck, objective_terms, rel_err, GradCheckStats, LayerReport};
pub use linalg::{jacobi_eigh, matrix_sqrt_exact, random_spd, EigResult};
pub use update::{loss_gradients, update_oracle};
