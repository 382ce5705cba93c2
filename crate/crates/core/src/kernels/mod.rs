//! Numeric kernels: dense linear algebra and banded attention.

pub mod band;
pub mod dense;
