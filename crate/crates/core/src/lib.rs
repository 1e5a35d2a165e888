//! Stein variational gradient descent (SVGD) at desk scale.
//!
//! The crate implements the deterministic SVGD particle system, its
//! stochastic variant with kernel-correlated noise, and tilted dynamics,
//! together with the diagnostic machinery needed to test the identities
//! that relate them: the kernelised Stein discrepancy, RKHS drift norms,
//! tangent/cotangent norms of the Stein geometry, the pathwise
//! large-deviation rate functional, the limit Hamiltonian, the McKean
//! generator on cylinder functions, and 1-D continuum (density-level)
//! counterparts computed by Nyström quadrature.
//!
//! Modules map onto the conceptual layers:
//!
//! * [`kernels`] — kernel families, closed-form derivatives, Gram matrices.
//! * [`targets`] — unnormalised targets `π ∝ exp(-V)` with scores.
//! * [`dynamics`] — ODE/SDE/tilted time steppers and trajectory recording.
//! * [`diagnostics`] — particle-level KSD, rate functional, Hamiltonian,
//!   generator.
//! * [`continuum`] — 1-D density-level norms, energy-dissipation and
//!   Onsager-Machlup identity checks.
//! * [`compare`] — kernel comparison harness (Gram dominance, KSD sweeps,
//!   fixed-point tables).
//! * [`cli`] — experiment configs, artefact writers and the experiment
//!   runner behind the `steinlab` binary.

pub use nalgebra;

pub mod cli;
pub mod compare;
pub mod continuum;
pub mod diagnostics;
pub mod dynamics;
mod error;
pub mod kernels;
pub(crate) mod linalg;
pub mod targets;

pub use error::{Error, Result};
