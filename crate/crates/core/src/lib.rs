//! Weight clustering for convolutional layers.
//!
//! Kernels are split across channels into subspaces. Each subspace is
//! approximated either by k-means centroids ([`vq`]) or by sparse combinations
//! of a small dictionary ([`dl`]), and convolution then runs on the shared
//! representatives ([`conv`]). [`planner`] sizes both methods for a target
//! acceleration and [`eval`] compares their error.

pub mod cli;
pub mod conv;
pub mod dl;
pub mod error;
pub mod eval;
pub mod format;
mod linalg;
pub mod model;
pub mod options;
pub mod planner;
pub mod vq;

pub use error::{Error, Result};
pub use model::{KernelSet, LayerShape, SubspaceMatrix, SubspacePartition};
pub use options::{KmeansOptions, SolverOptions};
