//! Numerical laboratory for recursive stochastic optimal control of
//! Galerkin-truncated stochastic evolution equations.
//!
//! The crate simulates the controlled forward equation
//! `dX = [A X + a] dt + [B X + b] dW`, solves the recursive-utility BSDE, the
//! first- and second-order adjoint equations, and checks the stochastic
//! maximum principle and dynamic-programming relations against closed forms.

pub mod adjoint;
pub mod bsde;
pub mod cli;
pub mod dpp;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod galerkin;
pub mod grid;
pub mod mp;
pub mod problem;
pub mod problems;
pub mod regression;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use galerkin::{GalerkinSpace, OperatorFamily};
pub use grid::TimeGrid;
pub use problem::{Control, ControlProblem, Policy};
