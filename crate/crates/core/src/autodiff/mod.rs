//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! Every op is a method on [`Graph`] that computes its value eagerly and
//! records a backward rule. [`Graph::backward`] replays the tape in reverse.

mod conv;
mod elementwise;
mod graph;
mod linalg;
mod norm;
mod pool;

pub use conv::Pad2d;
pub use elementwise::{sigmoid, Activation};
pub use graph::{Graph, Var};
pub use norm::RunningStats;
pub use pool::UpsampleMode;

pub(crate) use graph::{BackCtx, Backward};

