//! Graph-network emulator for transient ice-sheet dynamics.
//!
//! The pipeline: triangulated meshes become graphs with a symmetric-normalized
//! adjacency operator ([`mesh`]); node features pass through a front end
//! (Gaussian-RBF KAN, node-wise MLP, or a plain GCN projection) into a stack of
//! graph-convolution layers that predict one-step residual updates of velocity
//! and thickness ([`model`]); a closed-form synthetic scenario generator
//! supplies ground truth ([`scenario`]); training uses Adam with a re-weighted
//! reconstruction loss ([`train`]); and [`eval`] measures RMSE and rollout
//! throughput.
//!
//! All numerics are 64-bit and deterministic: a (config, seed) pair reproduces
//! checkpoints and datasets byte for byte.

pub mod diff;
pub mod error;
pub mod eval;
pub mod kan;
pub mod layers;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod scenario;
pub mod train;

pub use error::{Error, Result};
