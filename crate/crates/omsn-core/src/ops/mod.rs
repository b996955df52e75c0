//! Differentiable operations, grouped by kind.
//!
//! Each operation is a method on [`crate::graph::Graph`]: it computes the
//! forward value eagerly, appends a node, and registers a backward rule with
//! the exact analytic gradient. Shape preconditions are checked up front and
//! rejected with a diagnostic rather than panicking.

mod activation;
mod linalg;
mod norm;
mod pool;
mod resize;
mod structure;

pub use norm::BatchNormMode;
pub use pool::{pool_output_extent, PoolSpec};
