//! Joint training and pruning of graph convolutional networks through a
//! double-well (phase-field) regularizer and a shared weight/mask
//! reparametrization.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`] / [`gradcheck`]: a small dense-`f64` tensor type,
//!   define-by-run reverse-mode autodiff, and a finite-difference oracle.
//! - [`phasefield`]: the double-well ultra-local term `V`, the discrete
//!   energy `E_P`, the gate `psi` and the latent-weight reparametrization,
//!   and the target-rate / threshold correspondence.
//! - [`regularizers`]: alternative sparsity penalties (l0 surrogate, l1,
//!   l2 cost, entropy) pluggable in place of, or jointly with, the
//!   phase-field energy.
//! - [`gcn`] / [`checkpoint`]: the multi-head aggregation + convolution
//!   block, model construction and a binary checkpoint format.
//! - [`pruning`]: thresholding, observed-rate measurement, the magnitude
//!   baseline, binarization and connectivity diagnostics.
//! - [`training`]: the joint objective, Adam, the loss-speed learning-rate
//!   rule and the training loop.
//! - [`data`]: synthetic skeleton sequences, a JSONL dataset format and
//!   anatomical adjacency construction.

pub mod checkpoint;
pub mod data;
pub mod gcn;
pub mod gradcheck;
pub mod phasefield;
pub mod pruning;
pub mod regularizers;
pub mod tape;
pub mod tensor;
pub mod training;

pub use gcn::{Activation, GcnArchitecture, GcnModel, InitScheme};
pub use phasefield::PhaseFieldParams;
pub use pruning::PruneReport;
pub use regularizers::{RegKind, RegularizerSpec};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
pub use training::TrainConfig;
