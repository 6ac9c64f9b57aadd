//! Dense arrays and the reverse-mode differentiation engine.

mod array;
mod graph;

pub use array::Array;
pub use graph::{Gradients, Graph, GraphNode, NodeId, Op, BCE_EPSILON};
