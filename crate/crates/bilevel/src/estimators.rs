//! Hypergradient estimators.
//!
//! The hypergradient of the outer objective splits into a direct part
//! `∇_x f(x, y)` and an indirect part `Jᵀ ∇_y f(x, y)` through the response
//! Jacobian `J = ∂y/∂x`. The partial zeroth-order estimators approximate only
//! `J`: they rerun the inner solver at `x + μu` for Gaussian directions `u`
//! and read the Jacobian action off the trajectory difference
//! `δ = (y^N(x+μu) − y^N(x)) / μ`, so `⟨δ, ∇_y f⟩ u` estimates the indirect
//! part without any second-order evaluation. The value-difference estimator
//! (HOZOG), exact trajectory differentiation (ITD), implicit-differentiation
//! solvers (AID-CG / AID-FP), and the closed-form oracle are provided as
//! baselines behind the same interface.

use ndarray::Array1;
use rayon::prelude::*;

use crate::error::{BilevelError, Result};
use crate::inner_solver::{gd_inner, make_batch_path, sgd_inner, InnerRun, InnerRunOptions};
use crate::problems::BilevelProblem;
use crate::scalar::{all_finite, Scalar};
use crate::seeding;

/// Knobs shared by every estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig<T> {
    /// Inner solver steps per run (N).
    pub inner_steps: usize,
    /// Number of Gaussian perturbation samples (Q).
    pub perturbations: usize,
    /// Smoothing scale of the perturbations (μ > 0).
    pub smoothing: T,
    /// Inner step size (α > 0).
    pub inner_lr: T,
    /// Reuse the previous inner solution as the next initial point.
    pub warm_start: bool,
    /// Inner minibatch size (stochastic estimators; `None` = full batch).
    pub inner_batch: Option<usize>,
    /// Outer minibatch size (stochastic estimators; `None` = full batch).
    pub outer_batch: Option<usize>,
}

impl<T: Scalar> EstimatorConfig<T> {
    pub fn new(inner_steps: usize, perturbations: usize, smoothing: T, inner_lr: T) -> Self {
        EstimatorConfig {
            inner_steps,
            perturbations,
            smoothing,
            inner_lr,
            warm_start: false,
            inner_batch: None,
            outer_batch: None,
        }
    }

    /// Check the structural invariants against one problem instance.
    pub fn validate<P>(&self, problem: &P) -> Result<()>
    where
        P: BilevelProblem<T> + ?Sized,
    {
        if self.inner_steps < 1 {
            return Err(BilevelError::InvalidConfig(
                "inner step count must be at least 1".into(),
            ));
        }
        if self.perturbations < 1 {
            return Err(BilevelError::InvalidConfig(
                "perturbation count must be at least 1".into(),
            ));
        }
        if self.smoothing <= T::zero() {
            return Err(BilevelError::InvalidConfig(
                "smoothing scale must be positive".into(),
            ));
        }
        if self.inner_lr <= T::zero() {
            return Err(BilevelError::InvalidConfig(
                "inner step size must be positive".into(),
            ));
        }
        if let Some(s) = self.inner_batch {
            if s < 1 || s > problem.inner_sample_count() {
                return Err(BilevelError::InvalidConfig(format!(
                    "inner batch size {s} out of range 1..={}",
                    problem.inner_sample_count()
                )));
            }
        }
        if let Some(df) = self.outer_batch {
            if df < 1 || df > problem.outer_sample_count() {
                return Err(BilevelError::InvalidConfig(format!(
                    "outer batch size {df} out of range 1..={}",
                    problem.outer_sample_count()
                )));
            }
        }
        Ok(())
    }
}

/// One Gaussian search direction together with its smoothing scale.
#[derive(Debug, Clone)]
pub struct GaussianPerturbation<T> {
    pub direction: Array1<T>,
    pub smoothing: T,
}

impl<T: Scalar> GaussianPerturbation<T> {
    /// Draw the direction for sample `index` from the stream
    /// `(seed, PERTURBATION, index)`.
    pub fn sample(seed: u64, index: u64, dim: usize, smoothing: T) -> Self {
        let mut rng = seeding::stream(seed, &[seeding::TAG_PERTURBATION, index]);
        GaussianPerturbation {
            direction: seeding::gaussian_vector(&mut rng, dim),
            smoothing,
        }
    }

    /// The perturbed outer point `x + μu`.
    pub fn shifted(&self, x: &Array1<T>) -> Array1<T> {
        x + &(&self.direction * self.smoothing)
    }
}

/// Evaluation counters, split by oracle kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    /// Inner gradient evaluations spent on solver updates.
    pub inner_grad: u64,
    /// Outer gradient evaluations.
    pub outer_grad: u64,
    /// Outer value evaluations.
    pub outer_value: u64,
    /// Hessian- and mixed-derivative-vector actions.
    pub second_order: u64,
    /// Extra evaluations spent on diagnostics (residuals).
    pub diagnostic: u64,
}

/// An estimated hypergradient plus diagnostics.
#[derive(Debug, Clone)]
pub struct HypergradEstimate<T> {
    /// The estimate of `∇Φ(x)`.
    pub grad: Array1<T>,
    /// Trajectory differences `δ_j`, one per perturbation (empty for the
    /// baselines that do not form them).
    pub deltas: Vec<Array1<T>>,
    /// `‖∇_y g(x, y^N)‖` of the base run.
    pub inner_residual: T,
    /// Final inner iterate of the base run (feeds warm starts and metrics).
    pub inner_solution: Array1<T>,
    /// Evaluation budget actually spent.
    pub evals: EvalCounts,
}

/// Jacobian-transpose action of the rank-one estimate `δ uᵀ` on `v`,
/// computed as `⟨δ, v⟩ u` without materializing the matrix.
pub fn delta_jvp<T: Scalar>(delta: &Array1<T>, v: &Array1<T>, direction: &Array1<T>) -> Array1<T> {
    direction * delta.dot(v)
}

fn divide_delta<T: Scalar>(
    perturbed: &Array1<T>,
    base: &Array1<T>,
    smoothing: T,
    sample: usize,
) -> Result<Array1<T>> {
    // Difference of final iterates first, division by μ second.
    let diff = perturbed - base;
    let delta = diff / smoothing;
    if !all_finite(&delta) {
        return Err(BilevelError::NonFiniteDelta { sample });
    }
    Ok(delta)
}

/// Partial zeroth-order hypergradient on a deterministic problem: one base
/// inner run at `x`, `Q` perturbed runs at `x + μu_j` (same start, same step
/// size, same step count), and the averaged rank-one Jacobian actions
///
/// `∇̂Φ(x) = ∇_x f(x, y^N) + (1/Q) Σ_j ⟨δ_j, ∇_y f(x, y^N)⟩ u_j`.
///
/// Spends exactly `(Q+1)·N` inner gradient and 2 outer gradient evaluations.
pub fn pzobo_hypergradient<T, P>(
    problem: &P,
    x: &Array1<T>,
    y_init: &Array1<T>,
    cfg: &EstimatorConfig<T>,
    seed: u64,
) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let base = gd_inner(
        problem,
        x,
        y_init,
        cfg.inner_lr,
        cfg.inner_steps,
        InnerRunOptions {
            keep_trajectory: false,
            compute_residual: true,
        },
    )?;
    let per: Vec<(Array1<T>, Array1<T>)> = (0..cfg.perturbations)
        .into_par_iter()
        .map(|j| {
            let pert = GaussianPerturbation::sample(seed, j as u64, x.len(), cfg.smoothing);
            let run = gd_inner(
                problem,
                &pert.shifted(x),
                y_init,
                cfg.inner_lr,
                cfg.inner_steps,
                InnerRunOptions::default(),
            )?;
            let delta = divide_delta(&run.solution, &base.solution, cfg.smoothing, j)?;
            Ok((pert.direction, delta))
        })
        .collect::<Result<_>>()?;
    assemble_partial_estimate(problem, x, base, per, cfg, None)
}

/// Stochastic partial zeroth-order hypergradient on a finite-sum problem:
/// the base run and all `Q` perturbed runs share one batch path, and the
/// outer gradients use an independently drawn outer batch.
pub fn pzobo_s_hypergradient<T, P>(
    problem: &P,
    x: &Array1<T>,
    y_init: &Array1<T>,
    cfg: &EstimatorConfig<T>,
    seed: u64,
) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let m = problem.inner_sample_count();
    let n = problem.outer_sample_count();
    let batch_size = cfg.inner_batch.unwrap_or(m);
    let outer_size = cfg.outer_batch.unwrap_or(n);
    let path = make_batch_path(seed, cfg.inner_steps, m, batch_size)?;
    let outer_idx = {
        if outer_size > n {
            return Err(BilevelError::InvalidConfig(format!(
                "outer batch size {outer_size} out of range 1..={n}"
            )));
        }
        let mut rng = seeding::stream(seed, &[seeding::TAG_OUTER_BATCH]);
        let mut idx = rand::seq::index::sample(&mut rng, n, outer_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let base = sgd_inner(
        problem,
        x,
        y_init,
        cfg.inner_lr,
        &path,
        InnerRunOptions {
            keep_trajectory: false,
            compute_residual: true,
        },
    )?;
    let per: Vec<(Array1<T>, Array1<T>)> = (0..cfg.perturbations)
        .into_par_iter()
        .map(|j| {
            let pert = GaussianPerturbation::sample(seed, j as u64, x.len(), cfg.smoothing);
            let run = sgd_inner(
                problem,
                &pert.shifted(x),
                y_init,
                cfg.inner_lr,
                &path,
                InnerRunOptions::default(),
            )?;
            let delta = divide_delta(&run.solution, &base.solution, cfg.smoothing, j)?;
            Ok((pert.direction, delta))
        })
        .collect::<Result<_>>()?;
    assemble_partial_estimate(problem, x, base, per, cfg, Some(&outer_idx))
}

fn assemble_partial_estimate<T, P>(
    problem: &P,
    x: &Array1<T>,
    base: InnerRun<T>,
    per: Vec<(Array1<T>, Array1<T>)>,
    cfg: &EstimatorConfig<T>,
    outer_idx: Option<&[usize]>,
) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let batch = outer_idx;
    let grad_x = problem.outer_grad_x(x, &base.solution, batch);
    let grad_y = problem.outer_grad_y(x, &base.solution, batch);
    // Accumulate in sample order so parallel inner solves cannot change the
    // reduction.
    let mut indirect: Array1<T> = Array1::zeros(x.len());
    for (direction, delta) in &per {
        indirect = indirect + delta_jvp(delta, &grad_y, direction);
    }
    let q = T::cst(cfg.perturbations as f64);
    let grad = grad_x + indirect / q;
    let inner_grad = base.grad_evals * (cfg.perturbations as u64 + 1);
    Ok(HypergradEstimate {
        grad,
        deltas: per.into_iter().map(|(_, d)| d).collect(),
        inner_residual: base.residual.unwrap_or_else(T::zero),
        inner_solution: base.solution,
        evals: EvalCounts {
            inner_grad,
            outer_grad: 2,
            outer_value: 0,
            second_order: 0,
            diagnostic: base.diagnostic_evals,
        },
    })
}

/// Full zeroth-order baseline: estimates the whole hypergradient from outer
/// value differences, `(1/Q) Σ_j [(Φ̂(x+μu_j) − Φ̂(x)) / μ] u_j` with
/// `Φ̂(x) = f(x, y^N(x))`. Same inner-solve budget as the partial estimator.
pub fn hozog_hypergradient<T, P>(
    problem: &P,
    x: &Array1<T>,
    y_init: &Array1<T>,
    cfg: &EstimatorConfig<T>,
    seed: u64,
) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let base = gd_inner(
        problem,
        x,
        y_init,
        cfg.inner_lr,
        cfg.inner_steps,
        InnerRunOptions {
            keep_trajectory: false,
            compute_residual: true,
        },
    )?;
    let value_base = problem.outer_value(x, &base.solution, None);
    let contributions: Vec<Array1<T>> = (0..cfg.perturbations)
        .into_par_iter()
        .map(|j| {
            let pert = GaussianPerturbation::sample(seed, j as u64, x.len(), cfg.smoothing);
            let shifted = pert.shifted(x);
            let run = gd_inner(
                problem,
                &shifted,
                y_init,
                cfg.inner_lr,
                cfg.inner_steps,
                InnerRunOptions::default(),
            )?;
            let value = problem.outer_value(&shifted, &run.solution, None);
            let slope = (value - value_base) / cfg.smoothing;
            if !slope.is_finite() {
                return Err(BilevelError::NonFiniteDelta { sample: j });
            }
            Ok(&pert.direction * slope)
        })
        .collect::<Result<_>>()?;
    let mut grad: Array1<T> = Array1::zeros(x.len());
    for c in &contributions {
        grad += c;
    }
    grad /= T::cst(cfg.perturbations as f64);
    let inner_grad = base.grad_evals * (cfg.perturbations as u64 + 1);
    Ok(HypergradEstimate {
        grad,
        deltas: Vec::new(),
        inner_residual: base.residual.unwrap_or_else(T::zero),
        inner_solution: base.solution,
        evals: EvalCounts {
            inner_grad,
            outer_grad: 0,
            outer_value: cfg.perturbations as u64 + 1,
            second_order: 0,
            diagnostic: base.diagnostic_evals,
        },
    })
}

/// Exact differentiation through the inner trajectory. Propagates the
/// Jacobian-transpose action backwards along the stored iterates,
///
/// `Jᵀv = −α Σ_t M_tᵀ q_t`, `q_{t−1} = q_t − α H_t q_t`,
///
/// with `H_t`, `M_t` the inner Hessian and mixed derivative at iterate
/// `y^{t−1}`, so the d×p Jacobian is never materialized. Deterministic.
pub fn itd_hypergradient<T, P>(
    problem: &P,
    x: &Array1<T>,
    y_init: &Array1<T>,
    cfg: &EstimatorConfig<T>,
) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    if !problem.has_second_order() {
        return Err(BilevelError::Unsupported(
            "second-order actions required by trajectory differentiation",
        ));
    }
    let base = gd_inner(
        problem,
        x,
        y_init,
        cfg.inner_lr,
        cfg.inner_steps,
        InnerRunOptions {
            keep_trajectory: true,
            compute_residual: true,
        },
    )?;
    let trajectory = base.trajectory.as_ref().expect("trajectory requested");
    let grad_x = problem.outer_grad_x(x, &base.solution, None);
    let grad_y = problem.outer_grad_y(x, &base.solution, None);
    let mut backward = grad_y;
    let mut indirect: Array1<T> = Array1::zeros(x.len());
    let mut second_order = 0u64;
    for step in (0..cfg.inner_steps).rev() {
        let iterate = &trajectory[step];
        let cross = problem
            .cross_vec(x, iterate, &backward)
            .ok_or(BilevelError::Unsupported("mixed-derivative action"))?;
        indirect = indirect - cross * cfg.inner_lr;
        let hess = problem
            .hess_vec(x, iterate, &backward)
            .ok_or(BilevelError::Unsupported("Hessian action"))?;
        backward = backward - hess * cfg.inner_lr;
        second_order += 2;
    }
    Ok(HypergradEstimate {
        grad: grad_x + indirect,
        deltas: Vec::new(),
        inner_residual: base.residual.unwrap_or_else(T::zero),
        inner_solution: base.solution,
        evals: EvalCounts {
            inner_grad: base.grad_evals,
            outer_grad: 2,
            outer_value: 0,
            second_order,
            diagnostic: base.diagnostic_evals,
        },
    })
}

/// Linear solver used by approximate implicit differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AidSolver {
    ConjugateGradient,
    FixedPoint,
}

/// Approximate implicit differentiation: solve `∇²_y g(x, y^N) v = ∇_y f`
/// with the chosen solver and return `∇_x f − (∇_x∇_y g)ᵀ v`. The fixed-point
/// variant iterates `v ← v − α(∇²_y g · v − ∇_y f)` with the inner step size.
pub fn aid_hypergradient<T, P>(
    problem: &P,
    x: &Array1<T>,
    y_init: &Array1<T>,
    cfg: &EstimatorConfig<T>,
    solver: AidSolver,
    max_iters: usize,
    tol: T,
) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    if !problem.has_second_order() {
        return Err(BilevelError::Unsupported(
            "second-order actions required by implicit differentiation",
        ));
    }
    let base = gd_inner(
        problem,
        x,
        y_init,
        cfg.inner_lr,
        cfg.inner_steps,
        InnerRunOptions {
            keep_trajectory: false,
            compute_residual: true,
        },
    )?;
    let y = &base.solution;
    let grad_x = problem.outer_grad_x(x, y, None);
    let grad_y = problem.outer_grad_y(x, y, None);
    let apply = |v: &Array1<T>| -> Result<Array1<T>> {
        problem
            .hess_vec(x, y, v)
            .ok_or(BilevelError::Unsupported("Hessian action"))
    };
    let (v, second_order) = match solver {
        AidSolver::ConjugateGradient => conjugate_gradient(apply, &grad_y, max_iters, tol)?,
        AidSolver::FixedPoint => fixed_point(apply, &grad_y, cfg.inner_lr, max_iters, tol)?,
    };
    let cross = problem
        .cross_vec(x, y, &v)
        .ok_or(BilevelError::Unsupported("mixed-derivative action"))?;
    Ok(HypergradEstimate {
        grad: grad_x - cross,
        deltas: Vec::new(),
        inner_residual: base.residual.unwrap_or_else(T::zero),
        inner_solution: base.solution.clone(),
        evals: EvalCounts {
            inner_grad: base.grad_evals,
            outer_grad: 2,
            outer_value: 0,
            second_order: second_order + 1,
            diagnostic: base.diagnostic_evals,
        },
    })
}

fn tol_threshold<T: Scalar>(rhs: &Array1<T>, tol: T) -> T {
    tol * T::one().max(rhs.dot(rhs).sqrt())
}

fn conjugate_gradient<T, F>(
    apply: F,
    rhs: &Array1<T>,
    max_iters: usize,
    tol: T,
) -> Result<(Array1<T>, u64)>
where
    T: Scalar,
    F: Fn(&Array1<T>) -> Result<Array1<T>>,
{
    let threshold = tol_threshold(rhs, tol);
    let mut v: Array1<T> = Array1::zeros(rhs.len());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut evals = 0u64;
    if rr.sqrt() <= threshold {
        return Ok((v, evals));
    }
    for iter in 0..max_iters {
        let ap = apply(&p)?;
        evals += 1;
        let pap = p.dot(&ap);
        if pap <= T::zero() {
            return Err(BilevelError::SolverFailure {
                kind: "cg",
                reason: "non-positive curvature direction",
                residual: rr.sqrt().to_f64().unwrap_or(f64::NAN),
                iters: iter,
            });
        }
        let alpha = rr / pap;
        v = v + &p * alpha;
        r = r - ap * alpha;
        let rr_next = r.dot(&r);
        if rr_next.sqrt() <= threshold {
            return Ok((v, evals));
        }
        let beta = rr_next / rr;
        p = &r + &(p * beta);
        rr = rr_next;
    }
    Err(BilevelError::SolverFailure {
        kind: "cg",
        reason: "iteration cap reached before tolerance",
        residual: rr.sqrt().to_f64().unwrap_or(f64::NAN),
        iters: max_iters,
    })
}

fn fixed_point<T, F>(
    apply: F,
    rhs: &Array1<T>,
    step: T,
    max_iters: usize,
    tol: T,
) -> Result<(Array1<T>, u64)>
where
    T: Scalar,
    F: Fn(&Array1<T>) -> Result<Array1<T>>,
{
    let threshold = tol_threshold(rhs, tol);
    let mut v: Array1<T> = Array1::zeros(rhs.len());
    let mut evals = 0u64;
    let mut residual_norm = rhs.dot(rhs).sqrt();
    if residual_norm <= threshold {
        return Ok((v, evals));
    }
    for _ in 0..max_iters {
        let av = apply(&v)?;
        evals += 1;
        let residual = av - rhs;
        residual_norm = residual.dot(&residual).sqrt();
        if residual_norm <= threshold {
            return Ok((v, evals));
        }
        v = v - residual * step;
    }
    Err(BilevelError::SolverFailure {
        kind: "fixed-point",
        reason: "iteration cap reached before tolerance",
        residual: residual_norm.to_f64().unwrap_or(f64::NAN),
        iters: max_iters,
    })
}

/// Closed-form hypergradient for problems exposing the analytic oracle.
pub fn oracle_hypergradient<T, P>(problem: &P, x: &Array1<T>) -> Result<HypergradEstimate<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let oracle = problem
        .oracle(x)
        .ok_or(BilevelError::Unsupported("closed-form oracle"))?;
    let residual = crate::scalar::l2_norm(&problem.inner_grad_y(x, &oracle.y_star, None));
    Ok(HypergradEstimate {
        grad: oracle.hypergrad,
        deltas: Vec::new(),
        inner_residual: residual,
        inner_solution: oracle.y_star,
        evals: EvalCounts {
            diagnostic: 1,
            ..EvalCounts::default()
        },
    })
}
