//! Minimal tape-based autodiff and the parameter/optimizer machinery around it.

mod graph;
mod params;

pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
