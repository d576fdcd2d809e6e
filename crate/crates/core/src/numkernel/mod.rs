//! Dense `f64` tensors, value-level kernels, a reverse-mode tape and a
//! finite-difference gradient checker.

mod gradcheck;
mod lstm;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use lstm::{lstm_step, LstmParams};
pub use ops::{cosine_similarity, dot, matmul, matmul_nt, matvec, sigmoid, softmax, vecmat};
pub(crate) use ops::softmax_slice;
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::{ParamStore, Tensor};
