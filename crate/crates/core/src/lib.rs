//! Core engine: optimal stopping under non-linear `f`-expectations on a
//! finite Brownian–Poisson scenario lattice.
//!
//! The crate solves reflected backward stochastic differential equations
//! (RBSDEs) with completely irregular obstacles on a non-recombining
//! four-branch tree with a doubled time grid, extracts the full Mertens
//! decomposition `(Y, Z, k, h, A, C)`, verifies the structural identities of
//! the theory (Skorokhod minimality, orthogonality of the residual
//! martingale component, comparison, Snell-envelope minimality) as testable
//! properties, and prices American options with superhedging strategies in
//! imperfect jump markets.
//!
//! Module map:
//!
//! * [`lattice`] — the scenario tree, adapted processes, conditional
//!   expectations, martingale projections, stopping rules.
//! * [`bsde`] — Lipschitz drivers, one-step implicit solves, backward
//!   evaluation of the conditional `f`-expectation along stopping rules.
//! * [`rbsde`] — the reflected solver, Skorokhod/reconstruction reports, the
//!   reflection operator, Mertens decomposition, a-priori estimates.
//! * [`stopping`] — brute-force value oracles, ε-optimal and optimal rules,
//!   supermartingale and Snell-minimality verifiers.
//! * [`market`] — two-asset jump market, perfect/imperfect drivers, American
//!   option pricing and superhedge extraction.
//! * [`checks`] — seeded randomized verification suites shared by the CLI
//!   `verify` command and the acceptance tests.

pub mod bsde;
pub mod checks;
pub mod error;
pub mod expr;
pub mod generate;
pub mod lattice;
pub mod market;
pub mod parallel;
pub mod rbsde;
pub mod report;
pub mod stopping;

pub use error::Error;
pub use lattice::{AdaptedProcess, GridSpec, Lattice, NodeId, Phase, StoppingRule};
