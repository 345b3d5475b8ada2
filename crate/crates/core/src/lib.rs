//! Toy two-layer attention model for studying how multi-token prediction
//! induces planning circuits on star-graph path finding.
//!
//! The crate covers task generation, the forward pass and closed-form
//! gradients, the idealized transfer circuit, reduced training dynamics and a
//! small full-batch trainer.

pub mod circuit;
pub mod dynamics;
pub mod error;
pub mod grad;
pub mod model;
pub mod numerics;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
pub use grad::{check_grad, grad_deep, grad_shallow, grad_total, GradSet, LossWeights};
pub use model::{ar_context, encode, forward, mtp_loss, ntp_loss, ContentMatrix, DisentangledModel, ForwardTrace, LayerWeights, TrainingExample};
pub use numerics::{finite_diff_grad, masked_softmax, softmax_jacobian, Distribution, Matrix};
