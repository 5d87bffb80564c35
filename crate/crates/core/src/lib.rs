//! Spatio-temporal traffic forecasting with dilated synchronous graph
//! convolutions whose block adjacency structures are found by differentiable
//! search.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and Adam.
//! - [`metagraph`]: spatial graph ingestion and DTW-based temporal graphs.
//! - [`structure`]: candidate synchronous-graph matrices, softmax mixing,
//!   argmax finalisation and structure reports.
//! - [`layer`]: dilated window gathering, mixed-hop GLU convolution and the
//!   gated temporal convolution.
//! - [`model`]: the full network, its parameters and the L1 objective.
//! - [`pipeline`] and [`synth`]: dataset handling and a
//!   planted-structure generator.
//! - [`trainer`]: alternating structure search, final training and metrics.

// `!(x > 0.0)` checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod layer;
pub mod metagraph;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod structure;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
