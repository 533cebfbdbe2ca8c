//! Dense linear algebra, SVD, seeded randomness and reverse-mode autodiff.

mod autodiff;
mod rng;
mod svd;
mod tensor;

pub use autodiff::{cross_entropy, gelu, grad, norm_columns, sigmoid, softmax_columns, Tape, Var};
pub use rng::Rng;
pub use svd::{pinv_values, svd_full, SvdResult, CONVERGENCE_TOL, MAX_SWEEPS, PINV_RTOL};
pub use tensor::{centering_matrix, Tensor};
