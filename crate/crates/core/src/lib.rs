//! Stochastic linear-quadratic tracking with a partially singular terminal
//! constraint, solved exactly on finite scenario trees.
//!
//! The pipeline runs bottom-up:
//!
//! 1. [`lattice`] builds the tree and its exact conditional expectations.
//! 2. [`coefficients`] lays out the problem data and checks it.
//! 3. [`riccati`] computes the penalty weight `c` and the discounted
//!    process `L`.
//! 4. [`signal`] builds the target the optimal controller tracks.
//! 5. [`controller`] runs the feedback law and evaluates the costs.
//! 6. [`oracle`] solves the same problem by plain dynamic programming.
//! 7. [`cli`] wires this into scenario files and reports.

pub mod cli;
pub mod coefficients;
pub mod controller;
pub mod error;
pub mod lattice;
pub mod oracle;
pub mod riccati;
pub mod signal;

pub use coefficients::{CoefficientSet, CoefficientSpecs, ModelSpec, Penalty, Slot};
pub use error::{Error, Result};
pub use lattice::{AdaptedProcess, LatticeKind, NodeId, ScenarioTree, TimeGrid};
pub use riccati::{RiccatiSolution, Truncation};
