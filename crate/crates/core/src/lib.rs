//! Sparse sliding-window attention for long sequences.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors with reverse-mode gradients.
//! * [`pattern`]: which query/key pairs a sliding-window, dilated or global
//!   pattern attends to.
//! * [`kernels`]: banded `QKᵀ`, softmax and `PV` in loop, chunked and dense
//!   implementations.
//! * [`attention`]: the multi-head local + global self-attention layer.
//! * [`model`]: character LM, masked LM and encoder-decoder assemblies,
//!   plus beam search.
//! * [`embed`]: position-table extension and parameter freezing.
//! * [`train`] and [`eval`]: staged training and sliding-window BPC.
//! * [`bench`], [`corpus`] and [`checkpoint`]: scaling measurements, data
//!   ingestion and persistence.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod params;
pub mod pattern;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
