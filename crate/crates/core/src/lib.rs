//! Prototypical-network few-shot classification with cosine, Euclidean and
//! additive angular margin heads, on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod metric;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
