//! Independent oracles and statistical probes: finite-difference Jacobians
//! and hypergradients, bias/variance estimation over repeated trials,
//! Jacobian-Lipschitz probes, and the constant calculator for the quadratic
//! family.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::Result;
use crate::estimators::HypergradEstimate;
use crate::inner_solver::{gd_inner, sgd_inner, BatchPath, InnerRunOptions};
use crate::problems::{BilevelProblem, ConstantsBundle, QuadraticProblem};
use crate::scalar::{frobenius_norm, l2_norm, Scalar};
use crate::seeding;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Inner-solver settings used by the finite-difference oracles.
#[derive(Debug, Clone)]
pub struct InnerSettings<T> {
    pub step_size: T,
    pub steps: usize,
    pub y_init: Array1<T>,
}

/// Central-difference Jacobian of `x ↦ y^N(x)` (d×p), column by column;
/// spends `2p` inner solves.
pub fn finite_diff_jacobian<T, P>(
    problem: &P,
    x: &Array1<T>,
    inner: &InnerSettings<T>,
    h: T,
) -> Result<Array2<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let p = x.len();
    let d = problem.inner_dim();
    let columns: Vec<Array1<T>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let solve = |xx: &Array1<T>| {
                gd_inner(
                    problem,
                    xx,
                    &inner.y_init,
                    inner.step_size,
                    inner.steps,
                    InnerRunOptions::default(),
                )
            };
            let yp = solve(&xp)?.solution;
            let ym = solve(&xm)?.solution;
            Ok((yp - ym) / (T::cst(2.0) * h))
        })
        .collect::<Result<_>>()?;
    let mut jac = Array2::zeros((d, p));
    for (j, col) in columns.iter().enumerate() {
        jac.column_mut(j).assign(col);
    }
    Ok(jac)
}

/// Finite-difference Jacobian of the SGD output along a fixed batch path.
pub fn finite_diff_jacobian_with_path<T, P>(
    problem: &P,
    x: &Array1<T>,
    step_size: T,
    path: &BatchPath,
    y_init: &Array1<T>,
    h: T,
) -> Result<Array2<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let p = x.len();
    let d = problem.inner_dim();
    let columns: Vec<Array1<T>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let solve = |xx: &Array1<T>| {
                sgd_inner(problem, xx, y_init, step_size, path, InnerRunOptions::default())
            };
            let yp = solve(&xp)?.solution;
            let ym = solve(&xm)?.solution;
            Ok((yp - ym) / (T::cst(2.0) * h))
        })
        .collect::<Result<_>>()?;
    let mut jac = Array2::zeros((d, p));
    for (j, col) in columns.iter().enumerate() {
        jac.column_mut(j).assign(col);
    }
    Ok(jac)
}

/// Central-difference gradient of the solved outer objective
/// `x ↦ f(x, y^M(x))`; the reference hypergradient on problems without a
/// closed-form oracle. Spends `2p` inner solves of `M` steps.
pub fn fd_hypergradient<T, P>(
    problem: &P,
    x: &Array1<T>,
    inner: &InnerSettings<T>,
    h: T,
) -> Result<Array1<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let p = x.len();
    let entries: Vec<T> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let value = |xx: &Array1<T>| -> Result<T> {
                let run = gd_inner(
                    problem,
                    xx,
                    &inner.y_init,
                    inner.step_size,
                    inner.steps,
                    InnerRunOptions::default(),
                )?;
                Ok(problem.outer_value(xx, &run.solution, None))
            };
            Ok((value(&xp)? - value(&xm)?) / (T::cst(2.0) * h))
        })
        .collect::<Result<_>>()?;
    Ok(Array1::from_vec(entries))
}

/// Where the reference gradient for a bias/variance report comes from.
#[derive(Debug, Clone)]
pub enum ReferenceGrad<T> {
    /// The problem's closed-form oracle.
    Oracle,
    /// Finite differences of the solved outer objective.
    FiniteDifference { inner: InnerSettings<T>, h: T },
    /// A precomputed reference (e.g. shared across configurations).
    Explicit(Array1<T>),
}

/// One row of bias/variance statistics for an estimator configuration.
#[derive(Debug, Clone)]
pub struct BiasVarianceReport<T> {
    pub estimator: String,
    pub inner_steps: usize,
    pub perturbations: usize,
    pub smoothing: T,
    pub inner_batch: Option<usize>,
    pub outer_batch: Option<usize>,
    pub trials: usize,
    /// Mean estimate across trials.
    pub mean: Array1<T>,
    /// `‖mean − ∇Φ_ref‖`.
    pub bias: T,
    /// Mean squared deviation from the trial mean.
    pub variance: T,
    pub ref_source: &'static str,
}

/// Run `estimator` for `trials` independent substreams of `seed` and report
/// empirical bias and variance against the reference gradient. The
/// configuration is carried into the report verbatim. Trials are evaluated
/// in parallel and reduced in trial order.
#[allow(clippy::too_many_arguments)]
pub fn estimate_bias_variance<T, P, F>(
    problem: &P,
    x: &Array1<T>,
    estimator_name: &str,
    estimator: F,
    config: &crate::estimators::EstimatorConfig<T>,
    trials: usize,
    seed: u64,
    reference: &ReferenceGrad<T>,
) -> Result<BiasVarianceReport<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
    F: Fn(u64) -> Result<HypergradEstimate<T>> + Sync,
{
    let (reference_grad, ref_source): (Array1<T>, &'static str) = match reference {
        ReferenceGrad::Oracle => {
            let est = crate::estimators::oracle_hypergradient(problem, x)?;
            (est.grad, "oracle")
        }
        ReferenceGrad::FiniteDifference { inner, h } => {
            (fd_hypergradient(problem, x, inner, *h)?, "finite-difference")
        }
        ReferenceGrad::Explicit(g) => (g.clone(), "explicit"),
    };
    let estimates: Vec<Array1<T>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = seeding::derive_seed(seed, &[seeding::TAG_TRIAL, t as u64]);
            Ok(estimator(trial_seed)?.grad)
        })
        .collect::<Result<_>>()?;
    let mut mean: Array1<T> = Array1::zeros(x.len());
    for e in &estimates {
        mean += e;
    }
    mean /= T::cst(trials as f64);
    let mut variance = T::zero();
    for e in &estimates {
        let dev = e - &mean;
        variance += dev.dot(&dev);
    }
    variance /= T::cst(trials as f64);
    let bias = l2_norm(&(&mean - &reference_grad));
    Ok(BiasVarianceReport {
        estimator: estimator_name.to_string(),
        inner_steps: config.inner_steps,
        perturbations: config.perturbations,
        smoothing: config.smoothing,
        inner_batch: config.inner_batch,
        outer_batch: config.outer_batch,
        trials,
        mean,
        bias,
        variance,
        ref_source,
    })
}

/// Serialize reports with the fixed header
/// `estimator,N,Q,mu,S,trials,bias,variance,ref_source`.
pub fn reports_to_csv<T: Scalar>(reports: &[BiasVarianceReport<T>]) -> String {
    let mut out = String::from("estimator,N,Q,mu,S,trials,bias,variance,ref_source\n");
    for r in reports {
        let s = r
            .inner_batch
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.16e},{},{},{:.16e},{:.16e},{}\n",
            r.estimator,
            r.inner_steps,
            r.perturbations,
            r.smoothing,
            s,
            r.trials,
            r.bias,
            r.variance,
            r.ref_source
        ));
    }
    out
}

pub fn write_reports_csv<T: Scalar>(
    reports: &[BiasVarianceReport<T>],
    path: &Path,
) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(reports_to_csv(reports).as_bytes())
}

/// Finite-difference probe of the Jacobian's Lipschitz ratio
/// `‖J_N(x₁) − J_N(x₂)‖_F / ‖x₁ − x₂‖`.
pub fn lipschitz_probe<T, P>(
    problem: &P,
    x1: &Array1<T>,
    x2: &Array1<T>,
    inner: &InnerSettings<T>,
    h: T,
) -> Result<T>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    let j1 = finite_diff_jacobian(problem, x1, inner, h)?;
    let j2 = finite_diff_jacobian(problem, x2, inner, h)?;
    let dx = l2_norm(&(x1 - x2));
    Ok(frobenius_norm(&(&j1 - &j2)) / dx)
}

/// Constants for the quadratic family: curvature extremes from the spectrum,
/// zero third-derivative terms, and value/minimizer bounds over the
/// documented probe box.
pub fn constants_for_quadratic<T: Scalar>(problem: &QuadraticProblem<T>) -> ConstantsBundle<T> {
    problem.constants().expect("quadratic constants")
}

/// Contraction and noise constants of the stochastic Jacobian recursion at
/// the coupled step size `α = 2/(L + μ_g)` and the smallest admissible
/// trade-off coefficient `γ = (L + μ_g)/μ_g²`.
#[derive(Debug, Clone, Copy)]
pub struct ContractionConstants<T> {
    /// Per-step contraction factor of the Jacobian-error recursion (< 1).
    pub contraction: T,
    /// Coefficient of the mixed-derivative noise term.
    pub coeff_mixed: T,
    /// Coefficient of the Hessian noise term.
    pub coeff_hessian: T,
    /// Additive noise floor per step (scales like 1/S).
    pub noise_floor: T,
    /// Coefficient of the decaying distance term.
    pub distance_coeff: T,
    /// The trade-off coefficient γ actually used.
    pub tradeoff: T,
}

/// Evaluate the recursion constants for a bundle at inner batch size `s` and
/// empirical gradient-noise level `sigma`.
pub fn stochastic_jacobian_constants<T: Scalar>(
    bundle: &ConstantsBundle<T>,
    s: usize,
    sigma: T,
) -> ContractionConstants<T> {
    let l = bundle.grad_lipschitz;
    let mu = bundle.strong_convexity;
    let tau = bundle.mixed_lipschitz;
    let rho = bundle.hessian_lipschitz;
    let d_bound = bundle.minimizer_bound;
    let alpha = T::cst(2.0) / (l + mu);
    let gamma = (l + mu) / (mu * mu);
    let one = T::one();
    let decay = one - alpha * mu;
    let contraction = decay * (decay + alpha / gamma + alpha * l / (gamma * mu));
    let coeff_mixed = alpha * (alpha + gamma * decay + alpha * l / mu);
    let coeff_hessian = l / mu * coeff_mixed;
    let s_t = T::cst(s as f64);
    let two = T::cst(2.0);
    let noise_floor = two * (tau * tau * coeff_mixed + rho * rho * coeff_hessian) * sigma * sigma
        / (mu * l * s_t)
        + two * l * l / s_t * (coeff_mixed + coeff_hessian);
    let distance_coeff =
        two * (tau * tau * coeff_mixed + rho * rho * coeff_hessian) * d_bound * d_bound;
    ContractionConstants {
        contraction,
        coeff_mixed,
        coeff_hessian,
        noise_floor,
        distance_coeff,
        tradeoff: gamma,
    }
}

/// Means over the doubling index windows `[1,2), [2,4), [4,8), …` of a
/// series; the standard summary for trend checks on gradient-norm traces.
pub fn doubling_window_means<T: Scalar>(series: &[T]) -> Vec<T> {
    let mut out = Vec::new();
    let mut lo = 1usize;
    while lo < series.len() {
        let hi = (2 * lo).min(series.len());
        let mut acc = T::zero();
        for v in &series[lo..hi] {
            acc += *v;
        }
        out.push(acc / T::cst((hi - lo) as f64));
        lo *= 2;
    }
    out
}

/// Least-squares slope of `values` against `xs`.
pub fn regression_slope<T: Scalar>(xs: &[T], values: &[T]) -> T {
    let n = T::cst(xs.len() as f64);
    let mean_x = xs.iter().copied().sum::<T>() / n;
    let mean_v = values.iter().copied().sum::<T>() / n;
    let mut num = T::zero();
    let mut den = T::zero();
    for (&x, &v) in xs.iter().zip(values.iter()) {
        num += (x - mean_x) * (v - mean_v);
        den += (x - mean_x) * (x - mean_x);
    }
    num / den
}
