//! Tensor container, model manifests and persisted solutions.

mod container;
mod manifest;
mod solution;

pub use container::*;
pub use manifest::*;
pub use solution::*;
