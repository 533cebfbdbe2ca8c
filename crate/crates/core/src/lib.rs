//! Structured pruning of transformer encoders and pre-RMSNorm stacks.
//!
//! The pipeline has three phases:
//!
//! 1. **Projection.** Calibration features are collected from a trained
//!    model ([`calibration`]) and their principal components are injected
//!    around every normalization site and inside every attention head
//!    ([`projection`]). With all masks at one the projected model computes
//!    exactly the same function as the original.
//! 2. **Pruning.** Dimension, head and layer masks are trained jointly with
//!    the weights under a Lagrangian expected-sparsity penalty, then
//!    binarized ([`pruning`]).
//! 3. **Fusing.** Binary masks and projections are merged into rectangular
//!    weights plus residual matrices, yielding a structurally smaller model
//!    whose logits equal the masked projected model ([`fusing`]).
//!
//! [`numerics`] carries the dense linear algebra, SVD and the reverse-mode
//! tape that every other module builds on.

pub mod calibration;
pub mod checkpoint;
pub mod error;
pub mod fusing;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod projection;
pub mod pruning;
pub mod report;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
