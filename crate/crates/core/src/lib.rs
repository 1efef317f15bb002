// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training-free concept erasure in cross-attention value spaces.
//!
//! Prompt value vectors are projected onto the orthogonal complement of the
//! target concepts' value vectors, token by token, with an optional sigmoid
//! shift that softens the projection for weakly related tokens. The crate
//! ships the linear algebra, a toy causal text encoder, a single-head
//! cross-attention layer with an erasure hook, and a synthetic multi-layer
//! pipeline that measures what the erasure removes.

pub mod attention;
pub mod avde;
pub mod check;
pub mod cli;
pub mod eraser;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod tokens;
pub mod viz;

pub use error::{Error, Result};
