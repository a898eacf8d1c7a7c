//! Bilevel optimization toolkit built around Hessian-free hypergradient
//! estimation.
//!
//! The outer objective `Φ(x) = f(x, y*(x))` of a bilevel problem is driven by
//! the response Jacobian `∂y*/∂x`, normally the expensive second-order part
//! of the hypergradient. The partial zeroth-order estimators here (`pzobo_*`)
//! approximate only that Jacobian from the difference of two inner
//! optimization trajectories — one at `x`, one at a Gaussian-perturbed
//! `x + μu` — while the direct gradients are evaluated analytically. The
//! crate also ships the classic baselines (value-difference smoothing,
//! trajectory differentiation, implicit differentiation with CG or
//! fixed-point solves, and a closed-form oracle on the quadratic family),
//! seeded problem generators, and the statistical probes used to verify
//! bias, variance, and convergence behavior.
//!
//! Everything is generic over the scalar type via [`Scalar`] (`f32`/`f64`);
//! the `*64` aliases below fix the default precision used by the benchmark
//! harness.

pub mod error;
pub mod estimators;
pub mod inner_solver;
pub mod linalg;
pub mod outer_opt;
pub mod problems;
pub mod scalar;
pub mod seeding;
pub mod verification;

pub use error::{BilevelError, Result};
pub use scalar::Scalar;

/// Double-precision quadratic problem.
pub type QuadraticProblem64 = problems::QuadraticProblem<f64>;
/// Double-precision hyper-representation problem.
pub type HrProblem64 = problems::HrProblem<f64>;
/// Double-precision hyperparameter-optimization problem.
pub type HoProblem64 = problems::HoProblem<f64>;
/// Double-precision estimator configuration.
pub type EstimatorConfig64 = estimators::EstimatorConfig<f64>;
/// Double-precision hypergradient estimate.
pub type HypergradEstimate64 = estimators::HypergradEstimate<f64>;
/// Double-precision outer-optimizer state.
pub type OuterState64 = outer_opt::OuterState<f64>;
/// Double-precision constants bundle.
pub type ConstantsBundle64 = problems::ConstantsBundle<f64>;
