//! Node-wise spectral filtering on graphs via a mixture of Chebyshev experts.
//!
//! The crate bundles everything needed to study per-node filter selection on
//! graphs that mix homophilic and heterophilic neighborhoods:
//!
//! - [`graph`]: sparse CSR graphs, normalized operators, homophily metrics,
//!   and community detection.
//! - [`csbm`]: a mixed contextual stochastic block model generator where each
//!   node draws its edges from either a homophilic or a heterophilic regime.
//! - [`spectral`]: Chebyshev polynomial filters, basis precomputation, and
//!   the filter smoothing (total squared variation) loss.
//! - [`autodiff`]: a small reverse-mode tape over dense matrices with sparse
//!   operator application as a primitive.
//! - [`model`]: the mixture-of-experts model itself — spectral experts, a
//!   GIN-style gating network, soft/top-k combination, and the training loss.
//! - [`train`]: full-batch training with per-group optimizer settings, seeded
//!   splits, and early stopping.
//! - [`analysis`]: homophily densities, community homophily, gate-weight and
//!   accuracy breakdowns by homophily bucket.
//! - [`separability`]: empirical validation of linear separability under
//!   global vs. node-wise filtering on generated graphs.
//! - [`io`]: text dataset bundles (edges/features/labels) and CSV reports.

pub mod analysis;
pub mod autodiff;
pub mod csbm;
pub mod error;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod model;
pub mod separability;
pub mod spectral;
pub mod svg;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
