//! Inexact Frank-Wolfe solvers for constrained bilevel optimization.
//!
//! The crate is organized bottom-up:
//!
//! - [`domains`]: feasible polytopes with linear minimization oracles.
//! - [`objectives`] and [`oracles`]: smooth test objectives and gradient
//!   oracles, exact or with a certified error budget.
//! - [`stepsize`]: the closed-form short step and Armijo backtracking.
//! - [`solvers`]: vanilla, away-step and pairwise Frank-Wolfe.
//! - [`hypergrad`]: ITD/AID hypergradients of fixed-point bilevel problems.
//! - [`problems`]: a solvable quadratic toy, multilayer graph SSL and
//!   dataset distillation.

pub mod domains;
pub mod hypergrad;
pub mod linalg;
pub mod objectives;
pub mod oracles;
pub mod problems;
pub mod solvers;
pub mod stepsize;
