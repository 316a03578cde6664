//! Entropy-controlled flow matching (ECFM) as a numerical laboratory.
//!
//! The crate trains entropy-budgeted velocity fields on low-dimensional
//! transport problems, checks the entropy-rate identities with independent
//! estimators, reproduces the collapse counterexample for unconstrained flow
//! matching, and assembles certification reports (effective budgets, modal
//! floors, empirical stability slopes).
//!
//! Module map:
//!
//! * [`measures`]: Gaussian mixtures, particle ensembles, entropy, Fisher
//!   information, `W_2`, mode sets and time grids.
//! * [`fields`]: velocity fields with exact Jacobians (RBF + affine, analytic
//!   teachers, mixture scores) and Hutchinson divergence.
//! * [`dynamics`]: ODE/SDE particle transport, current velocity, FM risk.
//! * [`entropy_control`]: entropy-rate estimators, LCBs and effective budgets.
//! * [`trainer`]: the primal-dual augmented-Lagrangian trainer.
//! * [`transport_oracle`]: Sinkhorn / Schrödinger-bridge marginals,
//!   displacement geodesics, KL control energy, λ sweeps.
//! * [`collapse_lab`]: the collapse-then-redisperse counterexample.
//! * [`certify`]: budget selection, floors, stability sweeps and reports.

pub mod certify;
pub mod collapse_lab;
pub mod dynamics;
pub mod entropy_control;
mod error;
pub mod fields;
pub mod measures;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod transport_oracle;

pub use error::{Error, Result};
