//! Sequence-compression accelerated self-supervised pretraining of Vision
//! Transformers.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`numerics`]: tensors and a reverse-mode autodiff graph.
//! * [`vit`]: the encoder, flexible patch embedding (pseudo-inverse resize),
//!   EMA updates and the checkpoint container.
//! * [`compression`]: token dropout and patch scaling as sequence
//!   compression strategies.
//! * [`objectives`]: InfoNCE and distillation losses, per-algorithm assembly.
//! * [`cost`]: hardware-independent sample costs and budget accounting.
//! * [`analyzer`]: bias / variance / cost-adjusted MSE of compressed gradients.
//! * [`schedule`]: acceleration schedules and learning-rate schedules.
//! * [`data`]: synthetic and directory datasets, augmentation and batching.
//! * [`probes`]: nearest-neighbour and linear-probe evaluation.
//! * [`experiment`]: pretraining runs, sweeps, plots and run artifacts.

pub mod analyzer;
pub mod compression;
pub mod cost;
pub mod data;
mod error;
pub mod experiment;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod schedule;
pub mod vit;

pub use compression::{Algorithm, CompressionStrategy};
pub use cost::{sample_cost, BudgetLedger};
pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
pub use vit::{ViTConfig, ViTParams};
