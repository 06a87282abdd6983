//! Robust architecture search with cross-layer distillation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`graph`] provide a dense tensor type and tape-based
//!   reverse-mode autodiff over it, generic over `f32`/`f64`.
//! * [`nn`] builds convolutional networks and the masked supernet whose
//!   channel counts and tutor assignments are searched.
//! * [`gumbel`] and [`distill`] implement the relaxed categorical weights
//!   and the attention-transfer losses that couple student layers to
//!   teacher layers.
//! * [`search`], [`optim`] and [`attack`] run the two-phase pipeline
//!   (search, then train the derived network) and evaluate robustness
//!   under gradient-based attacks.
//! * [`data`], [`config`], [`snapshot`], [`report`] and [`commands`] cover
//!   datasets, run configuration, artifacts and the CLI entry points.

pub mod attack;
pub mod commands;
pub mod config;
pub mod data;
pub mod distill;
pub mod dtype;
pub mod error;
pub mod graph;
pub mod gumbel;
pub mod nn;
pub mod optim;
pub mod report;
pub mod search;
pub mod snapshot;
pub mod tensor;

pub use dtype::Real;
pub use error::{Error, Result};
pub use graph::{ConvStrategy, Graph, PoolKind, Var};
pub use tensor::Tensor;
