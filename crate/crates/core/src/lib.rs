// SPDX-License-Identifier: MIT OR Apache-2.0

//! # stitchkit
//!
//! Affine "stitches" between the residual streams of two language models,
//! trained from cached activations, and the machinery that rides on them:
//!
//! - [`tensor_store`]: the `AXT1` binary container for activation shards and
//!   weight matrices, plus deterministic masked batch streaming.
//! - [`synthgen`]: planted-dictionary worlds that generate paired A/B
//!   activations related by a known affine map. Every pipeline in this crate
//!   can be checked against them.
//! - [`stitch`]: the up/down affine maps and their four-term training loss.
//! - [`svcca`]: layer-pair selection by SVD + canonical correlation.
//! - [`sae`]: TopK (and forward-only JumpReLU) sparse autoencoders.
//! - [`transfer`]: closed-form SAE reparameterization across a stitch,
//!   vector transfer, zero-shot evaluation.
//! - [`analysis`]: sparse probing, steering vectors, attribution correlation,
//!   structural/semantic classification, entropy-feature scoring.
//! - [`scaling`]: analytic FLOP accounting and loss-vs-compute power laws.
//!
//! All numerics run in `f64`; activations are `f32` on disk.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sae;
pub mod scaling;
pub mod stitch;
pub mod svcca;
pub mod synthgen;
pub mod tensor_store;
pub mod transfer;

pub use error::{Error, Result};
pub use sae::{Activation, SaeMetrics, SaeParams};
pub use stitch::{LossParts, Stitch};
pub use tensor_store::{ActivationShard, DenseMatrix, ShardMeta};

/// Row-major-agnostic `f64` matrix used for all internal numerics.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense `f64` row vector (stored as a column vector; orientation is by convention).
pub type Vector = nalgebra::DVector<f64>;
