//! Numerical toolkit for the dynamics of correlations of hard spheres.
//!
//! The crate is organised bottom-up:
//!
//! * [`partitions`]: set-partition combinatorics and the ⋆-product algebra on
//!   function sequences (cluster expansions `Exp⋆` / `Ln⋆`).
//! * [`dynamics`]: exact event-driven flow of a few hard spheres in ℝ³ and the
//!   operator groups built on it.
//! * [`correlations`]: pointwise evaluators for cumulants of the flow groups and
//!   the expansions of correlation functions built from them.
//! * [`reduction`]: Monte Carlo quadrature over unobserved particles: reduced
//!   distribution functions, reduced correlation functions, dispersion.
//! * [`kinetics`]: homogeneous Boltzmann solver (DSMC), collision integrals,
//!   the Enskog collision term, scattering cumulants and low-density probes.
//!
//! Units: unit mass, positions measured in the same unit as the diameter,
//! dimensionless time.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlations;
pub mod dynamics;
pub mod error;
pub mod kinetics;
pub mod partitions;
pub mod reduction;
pub mod stats;

/// Version of this crate, recorded in output provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use correlations::{ClusterLabeling, Engine};
pub use dynamics::{CollisionEvent, FlowParams, PhasePoint, SystemState, Vec3};
pub use error::{Error, Result};
pub use partitions::{FunctionSequence, LabelSet, SetPartition};
pub use reduction::{InitialData, QuadratureSpec, ReducedEstimate};
