//! Gated injection of external word embeddings into a small BERT-style
//! encoder, with an attention-based injection baseline and the tooling to
//! train, evaluate and inspect both.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
