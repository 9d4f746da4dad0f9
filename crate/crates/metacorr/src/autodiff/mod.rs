//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Supports the gradient-through-gradient computation the meta optimizer
//! needs: the backward pass can be emitted as graph nodes, so differentiating
//! a gradient a second time is just another reverse sweep.

mod array;
mod graph;

pub use array::{Array, ParamSet};
pub use graph::{Graph, NodeId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch: {0}")]
    BadShape(String),
    #[error("non-finite value produced at {0}")]
    NonFinite(String),
    #[error("{0} is not a scalar")]
    NotScalar(String),
    #[error("unknown leaf '{0}'")]
    UnknownLeaf(String),
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
}
