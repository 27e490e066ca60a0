//! Steering-control synthesis for triangular (cascade) nonlinear systems in
//! the singular case.
//!
//! Given a cascade system whose block Jacobians may lose rank on large
//! regions of the state space, this crate constructs a continuous open-loop
//! control on `[t0, T]` driving a given initial state to a given terminal
//! state, and verifies robustness of the construction under bounded
//! perturbations.
//!
//! The synthesis anchors the plan at a regular chain (a time and a point
//! chain where every block Jacobian has full row rank), tracks a reference
//! family backwards from the target with a piecewise-constant control,
//! smooths it into a C¹ control with exactly pinned boundary values, and
//! closes the remaining gap with a shooting correction through a steering
//! basis of the linearized dynamics.

pub mod bench;
pub mod cli;
pub mod expr;
pub mod ltv_steer;
pub mod ode;
pub mod perturb;
pub mod regpoint;
pub mod registry;
pub mod shooting;
pub mod smoother;
pub mod sysmodel;
pub mod tracker;

pub use sysmodel::{Control, StateVector, Trajectory, TriangularSystem};
