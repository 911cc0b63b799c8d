//! High-degree steerable equivariant graph networks and the finite-group
//! machinery used to predict where equivariant outputs degenerate on
//! symmetric geometric graphs.
//!
//! Module map:
//!
//! * [`specfun`]: Legendre polynomials, real spherical harmonics, Wigner-D
//!   matrices and the O(3) parity representation.
//! * [`groups`]: finite subgroups of O(3), group-average projectors, trace
//!   tables and the degeneration predicate.
//! * [`geomgraph`]: geometric graphs, symmetric structure generators,
//!   symmetry detection, perturbation and the Coulomb N-body generator.
//! * [`autodiff`]: a small vector-valued reverse-mode tape, Adam and
//!   finite-difference checks.
//! * [`hegnn`]: the model, pooling, discrimination protocol, spherical
//!   harmonic sums, angle recovery and training.

pub mod autodiff;
mod error;
pub mod geomgraph;
pub mod groups;
pub mod hegnn;
pub mod specfun;

pub use error::{Error, Result};
