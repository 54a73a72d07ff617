//! Dense/sparse matrix plumbing and a small reverse-mode differentiation
//! engine. Everything downstream (geometry, pooling, layers, losses) is built
//! from these ops, so their gradient rules carry the whole tower.

mod dense;
mod diff;
pub mod gradcheck;
pub mod ops;
mod sparse;

pub use dense::DenseMatrix;
pub use diff::DiffNode;
pub use sparse::SparseAdjacency;

/// Floor for vanishing denominators in normalization steps.
pub const EPS_NORM: f64 = 1e-12;
