//! Neural substrate: dense f64 matrices, multi-layer perceptrons with
//! hand-derived backprop, Adam, and a central-difference gradient checker.
//!
//! Everything is plain `Vec<f64>` arithmetic over caller-owned buffers; there
//! is no autodiff tape. Each forward pass returns the cache its matching
//! backward pass needs, and every analytic gradient in the crate is audited
//! against [`gradient_check`].

mod adam;
mod gradcheck;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamParams, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use matrix::{log_softmax_row, softmax_row, softmax_rows, Matrix};
pub use mlp::{Activation, DenseLayer, LayerGrads, Mlp, MlpCache, MlpGrads};
