//! Multi-view contrastive representation learning on dense CPU tensors.
//!
//! The crate is organized as a small stack:
//!
//! - [`tensor`] — dense `f64` tensors with reverse-mode gradients ([`tensor::Graph`]),
//!   plus finite-difference gradient checking in [`tensor::gradcheck`].
//! - [`optim`] — Adam with decoupled weight decay and the cosine / plateau
//!   learning-rate schedules.
//! - [`data`] — manifest ingestion, a procedural synthetic multi-view face
//!   generator, the stochastic augmentation module and the group-aware batch
//!   sampler.
//! - [`models`] — convolutional encoder, projection head and linear classifier.
//! - [`losses`] — the multi-view contrastive loss with SimCLR / SupCon
//!   reference reductions, cross-entropy, and a brute-force oracle.
//! - [`training`] — self-supervised pre-training, the frozen-probe +
//!   fine-tune downstream stage, and a fully supervised baseline.
//! - [`eval`] — accuracy / confusion metrics, per-view degradation and
//!   label-fraction studies.
//! - [`checkpoint`] — versioned binary snapshots of parameters, optimizer
//!   state and RNG state.

pub mod error;
pub mod losses;
pub mod optim;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
