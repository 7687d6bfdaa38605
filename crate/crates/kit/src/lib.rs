//! Filesystem and workflow layer over `accent-core`: synthetic corpus
//! generation, the multitask training loop, checkpoint and embedding file
//! formats, and the `accent-kit` command line. Byte layouts for every file
//! this crate writes are documented in `docs/formats.md`.

pub mod analysis;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod trainer;

pub use error::{KitError, Result};
