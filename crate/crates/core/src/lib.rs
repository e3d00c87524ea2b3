//! Simulation and analysis of pull-based event-triggered consensus.
//!
//! A group of single-integrator agents sits on a weighted directed graph.
//! Each agent holds its control constant between its own trigger instants;
//! at a trigger it pulls the current states of its in-neighbours, refreshes
//! the combinational measurement
//!
//! ```text
//!     q_i(t) = -sum_j L_ij x_j(t)
//! ```
//!
//! and applies u_i = q_i until the next trigger. Trigger instants are chosen
//! by comparing the measurement error |q_i(t_k) - q_i(t)| against a
//! state-dependent or decaying threshold. Because the flow between triggers
//! is piecewise linear, the whole closed loop can be simulated exactly by a
//! discrete-event engine: no ODE solver, no sampling error.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: weighted digraphs, Laplacians, strongly connected components,
//!   the block upper-triangular normal form for reducible graphs;
//! - [`spectral`]: left Perron eigenvectors and the eigenvalue constants the
//!   trigger thresholds and decay certificates are built from;
//! - [`dynamics`]: exact piecewise-linear state propagation and neighbour
//!   prediction;
//! - [`triggers`]: trigger rules, their validity checks, and exact
//!   next-crossing computation;
//! - [`engine`]: the discrete-event loop (continuous monitoring and
//!   self-triggered variants) plus a dense fixed-step oracle;
//! - [`analysis`]: Lyapunov evaluation, decay fitting, envelope and
//!   inter-event audits;
//! - [`config`]: the on-disk graph/scenario formats and CSV output;
//! - [`random`]: seeded generators for test graphs and scenarios.

pub mod analysis;
pub mod config;
pub mod dynamics;
pub mod engine;
pub mod graph;
pub mod random;
pub mod spectral;
pub mod triggers;

/// Numerical tolerances used across the crate, in one place so audits and
/// implementations cannot drift apart.
pub mod tol {
    /// Residual tolerance for linear identities such as `xi^T L = 0`.
    pub const RESIDUAL: f64 = 1e-10;

    /// Slack allowed when checking positive semidefiniteness of matrix
    /// inequalities (smallest eigenvalue may be this far below zero).
    pub const PSD_SLACK: f64 = 1e-9;

    /// Slack for the per-block ordering `rho(Xi)/rho2(Q) * Q >= Xi`.
    pub const ORDERING_SLACK: f64 = 1e-10;

    /// Below this the zero eigenvalue of a Laplacian is considered repeated
    /// (the graph is treated as not irreducible).
    pub const ZERO_GAP: f64 = 1e-9;

    /// Row-sum tolerance when validating a Laplacian supplied as a matrix,
    /// scaled by the largest magnitude in the row.
    pub const ROW_SUM: f64 = 1e-9;

    /// Absolute time tolerance of the trigger-crossing root finder.
    pub const ROOT_TIME: f64 = 1e-12;

    /// Crossing times closer than this to the current instant are treated as
    /// simultaneous with it.
    pub const SIMULTANEITY: f64 = 1e-12;

    /// Allowed excess of |measurement error| over the threshold, both for the
    /// engine's start-of-segment contract check and for trace audits.
    pub const BOUNDARY: f64 = 1e-9;

    /// The two Lyapunov evaluation routes must agree to this (absolute, on
    /// desk-scale states).
    pub const FORMULA_AGREEMENT: f64 = 1e-12;
}
