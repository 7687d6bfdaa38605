//! Core math for utterance-level accent embeddings: dense f64 tensors, a
//! Wengert-list reverse-mode autodiff tape, a pool-and-mix frame encoder with
//! bidirectional GRU heads, CTC, margin-based discriminative losses, Adam,
//! and embedding-space similarity statistics.
//!
//! The crate is `no_std` (alloc required); everything with a filesystem or a
//! CLI lives in the companion `accent-kit` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod ctc;
pub mod encoder;
pub mod error;
pub(crate) mod fmath;
pub mod gradcheck;
pub mod gru;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use params::ParameterStore;
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
