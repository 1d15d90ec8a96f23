//! Dense `f64` tensors, reverse-mode differentiation, gradient checking and Adam.

mod adam;
pub mod catalog;
mod gradcheck;
pub mod ops;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_gradient, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use ops::{
    cosine_similarity, focal_term, kl_divergence, l2_normalize_rows, matmul, row_softmax,
    sigmoid, topk_rows, EPS_KL, EPS_NORM, EPS_PROB,
};
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
