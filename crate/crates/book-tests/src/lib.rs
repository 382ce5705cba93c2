//! Doctest harness for the chapters under `book/src`.

#[doc = include_str!("../../../book/src/intro.md")]
mod intro {}

#[doc = include_str!("../../../book/src/patterns.md")]
mod patterns {}

#[doc = include_str!("../../../book/src/kernels.md")]
mod kernels {}

#[doc = include_str!("../../../book/src/attention.md")]
mod attention {}

#[doc = include_str!("../../../book/src/models.md")]
mod models {}

#[doc = include_str!("../../../book/src/training.md")]
mod training {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
mod checkpoints {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
