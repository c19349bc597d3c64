//! Re-aligning a query-token image encoder to a multilingual language model:
//! the toy model, low-rank adapters, the multilingual instruction-mix forge,
//! staged training, beam-search decoding and the evaluation harness.

pub mod adapters;
pub mod app;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod forge;
pub mod generation;
pub mod model;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
