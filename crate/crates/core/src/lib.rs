//! Gradient-based bilevel optimization through unrolled inner dynamics.
//!
//! A [`BilevelProblem`](model::BilevelProblem) couples an inner objective
//! `L_λ(w)`, minimized by `T` steps of an iterative algorithm, with an outer
//! objective `E(w_T, λ)`. The [`hypergrad`] module differentiates the
//! truncated objective `f_T(λ) = E(w_T(λ), λ)` in reverse or forward mode,
//! [`outer`] descends on it, and [`oracle`] supplies closed-form references
//! for strongly convex quadratic inner problems.

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod hypergrad;
pub mod instrument;
pub mod model;
pub mod oracle;
pub mod outer;
pub mod problems;

pub use error::{Error, Result};
pub use hypergrad::{hypergrad, HypergradResult, Mode, WarmStartState};
pub use model::{assemble_problem, BilevelProblem, HyperVector, InnerState, Vector};
pub use outer::{run_outer, OuterConfig, OuterTrace};
