//! Stochastic linear-quadratic control with binary (bang-bang) controls on
//! exact binary scenario trees.
//!
//! The crate models the Brownian filtration by a non-recombining tree with
//! `±√dt` increments, so every expectation is an exact finite sum. On top of
//! that it provides the operator form of the cost, the spectral shift
//! `μ = −λ_max(N)` that turns the binary problem into a concave relaxed one,
//! maximum-principle checkers, and a brute-force oracle.

pub mod domain;
pub mod error;
pub mod instances;
pub mod io;
mod linalg;
pub mod model;
pub mod operators;
pub mod oracle;
pub mod principle;
pub mod spectral;
pub mod tree;

pub use domain::{ControlDomain, HalfSpace};
pub use error::{Error, Result};
pub use model::{ControlProcess, ControlTag, LqInstance, StepCoefficients};
pub use tree::{AdaptedProcess, NodeId, ProcessKind, ScenarioTree};
