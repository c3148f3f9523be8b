// With `f64` enabled, Real == f64 and the f64-accumulation casts in the
// analysis paths become no-ops; they are required in the default build.
#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]

//! A desk-scale vision transformer with residual attention connections
//! between consecutive self-attention layers, built on a minimal
//! reverse-mode autodiff tape.
//!
//! The crate covers the full workflow: a tensor/tape engine
//! ([`tensor`], [`tape`]), the attention and encoder stack ([`attention`],
//! [`model`]), attention-globality and feature-similarity diagnostics
//! ([`analysis`]), dataset ingestion and perturbation transforms ([`data`]),
//! and an Adam training loop with checkpointing ([`train`], [`checkpoint`]).

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub(crate) mod kernels;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
