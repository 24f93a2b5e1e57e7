//! Dense `f64` tensors with reverse-mode gradient recording, limited to the
//! operations the registration pipeline needs, plus a finite-difference
//! gradient checker.
//!
//! A [`Tape`] is one single-threaded recording session. Values are stored
//! behind `Rc`, so a tape is neither `Send` nor `Sync`; run independent
//! sessions on independent threads.

mod gradcheck;
mod knn;
mod scalar;
mod svd;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use knn::{knn_indices, KnnIndices};
pub use scalar::{huber, huber_grad, sigmoid, softplus};
pub use svd::{rotation_backward, rotation_from_svd, svd3, Svd3, BACKWARD_REGULARIZER, DEGENERACY_GAP};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
