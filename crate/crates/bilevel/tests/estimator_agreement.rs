//! Cross-checks between the estimators and the independent oracles on the
//! quadratic family, plus budget accounting and the inner-solver convergence
//! properties they rely on.

use bilevel::estimators::{
    aid_hypergradient, hozog_hypergradient, itd_hypergradient, oracle_hypergradient,
    pzobo_hypergradient, AidSolver, EstimatorConfig, GaussianPerturbation,
};
use bilevel::inner_solver::{gd_inner, InnerRunOptions};
use bilevel::linalg::{outer, random_orthogonal};
use bilevel::problems::{
    generate_hr_dataset, quadratic_make, BilevelProblem, EmbeddingKind, HrProblem,
    QuadraticProblem,
};
use bilevel::scalar::{frobenius_norm, l2_norm, Scalar};
use bilevel::seeding;
use bilevel::verification::{fd_hypergradient, InnerSettings};
use ndarray::{Array1, Array2};

fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    l2_norm(&(a - b)) / l2_norm(b).max(1e-12)
}

/// Materialize the exact N-step response Jacobian of a quadratic instance via
/// the forward recursion `J_t = (I − αA) J_{t−1} + αB`.
fn recursion_jacobian(problem: &QuadraticProblem<f64>, alpha: f64, steps: usize) -> Array2<f64> {
    let a = problem.curvature();
    let b = problem.coupling();
    let d = a.nrows();
    let contraction = Array2::eye(d) - &(a * alpha);
    let mut jac: Array2<f64> = Array2::zeros(b.raw_dim());
    for _ in 0..steps {
        jac = contraction.dot(&jac) + &(b * alpha);
    }
    jac
}

#[test]
fn inner_linear_convergence_obeys_the_strong_convexity_bound() {
    let problem: QuadraticProblem<f64> = quadratic_make(11, 5, 6, 10.0).unwrap();
    let (mu, l) = problem.curvature_range();
    let alpha = 1.0 / l;
    let mut rng = seeding::stream(50, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 5);
    let y_star = problem.minimizer(&x);
    let y0: Array1<f64> = seeding::gaussian_vector(&mut rng, 6);
    let base = l2_norm(&(&y0 - &y_star)).powi(2);
    for steps in [1, 5, 20, 60] {
        let run = gd_inner(&problem, &x, &y0, alpha, steps, InnerRunOptions::default()).unwrap();
        let err = l2_norm(&(&run.solution - &y_star)).powi(2);
        let bound = (1.0 - alpha * mu).powi(steps as i32) * base;
        assert!(
            err <= bound * (1.0 + 1e-9),
            "steps {steps}: {err} > bound {bound}"
        );
    }
}

#[test]
fn hyper_representation_inner_residual_decreases_every_step() {
    // Reference benchmark dataset at its published solver settings: 20 steps
    // at rate 1e-3 shrink the inner gradient norm monotonically.
    let data =
        generate_hr_dataset::<f64>(1, 100, 100, 50, 30, 0.1, EmbeddingKind::Linear, 0.1).unwrap();
    let problem = HrProblem::new(data);
    let mut rng = seeding::stream(59, &[seeding::TAG_INIT]);
    let x = problem.sample_initial(&mut rng);
    let y0 = Array1::zeros(problem.inner_dim());
    let run = gd_inner(
        &problem,
        &x,
        &y0,
        0.001,
        20,
        InnerRunOptions {
            keep_trajectory: true,
            compute_residual: true,
        },
    )
    .unwrap();
    let traj = run.trajectory.as_ref().unwrap();
    let mut prev = f64::INFINITY;
    for yt in traj.iter() {
        let residual = l2_norm(&problem.inner_grad_y(&x, yt, None));
        assert!(residual < prev, "residual {residual} did not decrease");
        prev = residual;
    }
    assert_eq!(run.residual.unwrap(), prev);
}

#[test]
fn inner_map_is_affine_in_x_for_quadratic_problems() {
    // Superposition probe: y^N(x + Δ) − y^N(x) is linear in Δ.
    let problem: QuadraticProblem<f64> = quadratic_make(12, 4, 5, 6.0).unwrap();
    let alpha = 0.12;
    let steps = 25;
    let mut rng = seeding::stream(51, &[seeding::TAG_TRIAL]);
    let y0 = Array1::zeros(5);
    let solve = |x: &Array1<f64>| {
        gd_inner(&problem, x, &y0, alpha, steps, InnerRunOptions::default())
            .unwrap()
            .solution
    };
    let x = seeding::gaussian_vector::<f64>(&mut rng, 4);
    let d1 = seeding::gaussian_vector::<f64>(&mut rng, 4);
    let d2 = seeding::gaussian_vector::<f64>(&mut rng, 4);
    let base = solve(&x);
    let r1 = solve(&(&x + &d1)) - &base;
    let r2 = solve(&(&x + &d2)) - &base;
    let r12 = solve(&(&x + &d1 + &d2)) - &base;
    let lhs = &r1 + &r2;
    assert!(l2_norm(&(&lhs - &r12)) < 1e-10 * l2_norm(&r12).max(1.0));
    // Scaling by 2 doubles the response.
    let r2x = solve(&(&x + &(&d1 * 2.0))) - &base;
    assert!(l2_norm(&(&(&r1 * 2.0) - &r2x)) < 1e-10 * l2_norm(&r2x).max(1.0));
}

#[test]
fn itd_recursion_matches_materialized_closed_form() {
    let problem: QuadraticProblem<f64> = quadratic_make(13, 4, 5, 5.0).unwrap();
    let (_, l) = problem.curvature_range();
    let alpha = 1.0 / l;
    let steps = 37;
    let jac = recursion_jacobian(&problem, alpha, steps);

    // Independent power-sum form α Σ_k (I − αA)^k B.
    let a = problem.curvature();
    let b = problem.coupling();
    let contraction = Array2::eye(5) - &(a * alpha);
    let mut power = Array2::eye(5);
    let mut sum: Array2<f64> = Array2::zeros(b.raw_dim());
    for _ in 0..steps {
        sum = sum + power.dot(b);
        power = contraction.dot(&power);
    }
    let closed = sum * alpha;
    let diff = frobenius_norm(&(&jac - &closed)) / frobenius_norm(&closed);
    assert!(diff < 1e-12, "recursion vs power sum: {diff}");

    // The trajectory-backward action reproduces J_Nᵀ ∇_y f exactly.
    let mut rng = seeding::stream(52, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 4);
    let cfg = EstimatorConfig::new(steps, 1, 1e-3, alpha);
    let est = itd_hypergradient(&problem, &x, &Array1::zeros(5), &cfg).unwrap();
    let run = gd_inner(&problem, &x, &Array1::zeros(5), alpha, steps, InnerRunOptions::default())
        .unwrap();
    let g_y = problem.outer_grad_y(&x, &run.solution, None);
    let g_x = problem.outer_grad_x(&x, &run.solution, None);
    let expect = &g_x + &jac.t().dot(&g_y);
    assert!(rel_err(&est.grad, &expect) < 1e-12);
    assert_eq!(est.evals.second_order, 2 * steps as u64);
}

#[test]
fn itd_with_zero_steps_returns_the_direct_gradient() {
    let problem: QuadraticProblem<f64> = quadratic_make(14, 3, 4, 3.0).unwrap();
    let x = ndarray::arr1(&[0.4, -0.1, 0.9]);
    let y0 = ndarray::arr1(&[1.0, 2.0, -1.0, 0.5]);
    let cfg = EstimatorConfig::new(0, 1, 1e-3, 0.2);
    let est = itd_hypergradient(&problem, &x, &y0, &cfg).unwrap();
    assert_eq!(est.grad, problem.outer_grad_x(&x, &y0, None));
    assert_eq!(est.inner_solution, y0);
}

#[test]
fn deterministic_baselines_agree_with_the_oracle_pairwise() {
    let problem: QuadraticProblem<f64> = quadratic_make(15, 6, 7, 8.0).unwrap();
    let (_, l) = problem.curvature_range();
    let alpha = 1.0 / l;
    let mut rng = seeding::stream(53, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 6);
    let y0 = Array1::zeros(7);
    let cfg = EstimatorConfig::new(400, 1, 1e-3, alpha);

    let oracle = oracle_hypergradient(&problem, &x).unwrap();
    let itd = itd_hypergradient(&problem, &x, &y0, &cfg).unwrap();
    let cg = aid_hypergradient(&problem, &x, &y0, &cfg, AidSolver::ConjugateGradient, 200, 1e-10)
        .unwrap();
    let fp = aid_hypergradient(&problem, &x, &y0, &cfg, AidSolver::FixedPoint, 5000, 1e-12)
        .unwrap();

    let grads = [&oracle.grad, &itd.grad, &cg.grad, &fp.grad];
    for (i, a) in grads.iter().enumerate() {
        for b in grads.iter().skip(i + 1) {
            let err = rel_err(a, b);
            assert!(err < 1e-6, "pairwise disagreement {err}");
        }
    }
}

#[test]
fn single_sample_jacobian_estimate_is_exact_on_affine_instances() {
    // c = 0, x = 0, y0 = 0 keeps every intermediate proportional to μ, so the
    // trajectory difference is the exact Jacobian action at working precision
    // for any smoothing scale.
    let d = 5;
    let p = 4;
    let mut rng = seeding::stream(54, &[seeding::TAG_TRIAL]);
    let q = random_orthogonal::<f64>(&mut rng, d);
    let mut diag = Array2::zeros((d, d));
    for i in 0..d {
        diag[[i, i]] = 1.0 + 3.0 * i as f64 / (d - 1) as f64;
    }
    let a = q.dot(&diag).dot(&q.t());
    let mut b = Array2::zeros((d, p));
    for i in 0..d {
        for j in 0..p {
            b[[i, j]] = f64::standard_normal(&mut rng);
        }
    }
    let problem =
        QuadraticProblem::from_parts(a, b, Array1::zeros(d), seeding::gaussian_vector(&mut rng, d), 0.1)
            .unwrap();
    let alpha = 0.25;
    let steps = 60;
    let jac = recursion_jacobian(&problem, alpha, steps);
    let x = Array1::zeros(p);
    let y0 = Array1::zeros(d);
    for (mu_idx, mu) in [1e-6, 1e-3, 1.0].into_iter().enumerate() {
        let cfg = EstimatorConfig::new(steps, 3, mu, alpha);
        let seed = 100 + mu_idx as u64;
        let est = pzobo_hypergradient(&problem, &x, &y0, &cfg, seed).unwrap();
        for (j, delta) in est.deltas.iter().enumerate() {
            let pert = GaussianPerturbation::sample(seed, j as u64, p, mu);
            let sample = outer(delta, &pert.direction);
            let exact = outer(&jac.dot(&pert.direction), &pert.direction);
            let err = frobenius_norm(&(&sample - &exact)) / frobenius_norm(&exact);
            assert!(err <= 1e-10, "mu={mu} sample {j}: relative error {err}");
        }
    }
}

#[test]
fn pzobo_mean_approaches_the_oracle() {
    let problem: QuadraticProblem<f64> = quadratic_make(16, 4, 4, 4.0).unwrap();
    let (_, l) = problem.curvature_range();
    let alpha = 1.0 / l;
    let mut rng = seeding::stream(55, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 4);
    let y0 = Array1::zeros(4);
    let cfg = EstimatorConfig::new(60, 500, 1e-3, alpha);
    let oracle = oracle_hypergradient(&problem, &x).unwrap();
    let trials = 30;
    let mut mean = Array1::zeros(4);
    for t in 0..trials {
        let est = pzobo_hypergradient(&problem, &x, &y0, &cfg, 1000 + t).unwrap();
        assert_eq!(est.evals.inner_grad, 501 * 60);
        assert_eq!(est.deltas.len(), 500);
        mean = mean + est.grad;
    }
    mean /= trials as f64;
    let err = rel_err(&mean, &oracle.grad);
    assert!(err < 0.1, "pzobo mean vs oracle: {err}");
}

#[test]
fn rank_one_jacobian_average_tightens_as_inverse_sqrt_of_sample_count() {
    let problem: QuadraticProblem<f64> = quadratic_make(17, 5, 3, 4.0).unwrap();
    let alpha = 0.25;
    let steps = 40;
    let jac = recursion_jacobian(&problem, alpha, steps);
    let y0 = Array1::zeros(3);
    let mut rng = seeding::stream(56, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 5);
    let trials = 80;
    let mut se = [0.0f64; 2];
    for (slot, q) in [100usize, 400].into_iter().enumerate() {
        let cfg = EstimatorConfig::new(steps, q, 1e-3, alpha);
        let mut total = 0.0;
        for t in 0..trials {
            let seed = 5000 + t;
            let est = pzobo_hypergradient(&problem, &x, &y0, &cfg, seed).unwrap();
            let mut mean_jac: Array2<f64> = Array2::zeros(jac.raw_dim());
            for (j, delta) in est.deltas.iter().enumerate() {
                let pert = GaussianPerturbation::sample(seed, j as u64, 5, 1e-3);
                mean_jac = mean_jac + outer(delta, &pert.direction);
            }
            mean_jac /= q as f64;
            total += frobenius_norm(&(&mean_jac - &jac));
        }
        se[slot] = total / trials as f64;
    }
    let ratio = se[0] / se[1];
    assert!(
        (1.6..=2.5).contains(&ratio),
        "sample-average error ratio for 4x samples: {ratio}"
    );
}

#[test]
fn hozog_converges_to_the_oracle_in_the_many_sample_small_smoothing_limit() {
    let problem: QuadraticProblem<f64> = quadratic_make(18, 2, 3, 3.0).unwrap();
    let (_, l) = problem.curvature_range();
    let alpha = 1.0 / l;
    let x = ndarray::arr1(&[0.7, -0.4]);
    let y0 = Array1::zeros(3);
    let cfg = EstimatorConfig::new(300, 5000, 1e-3, alpha);
    let oracle = oracle_hypergradient(&problem, &x).unwrap();
    let est = hozog_hypergradient(&problem, &x, &y0, &cfg, 77).unwrap();
    let err = rel_err(&est.grad, &oracle.grad);
    assert!(err < 0.10, "hozog vs oracle: {err}");
    assert_eq!(est.evals.inner_grad, 5001 * 300);
}

#[test]
fn full_hypergradient_smoothing_has_larger_variance_than_the_partial_estimator() {
    // Paired comparison: same perturbation streams, same inner budget.
    let problem: QuadraticProblem<f64> = quadratic_make(19, 50, 6, 5.0).unwrap();
    let (_, l) = problem.curvature_range();
    let alpha = 1.0 / l;
    let mut rng = seeding::stream(57, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 50);
    let y0 = Array1::zeros(6);
    let cfg = EstimatorConfig::new(40, 2, 1e-2, alpha);
    let trials = 400;
    let mut pz: Vec<Array1<f64>> = Vec::with_capacity(trials);
    let mut hz: Vec<Array1<f64>> = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let seed = seeding::derive_seed(123, &[seeding::TAG_TRIAL, t]);
        pz.push(pzobo_hypergradient(&problem, &x, &y0, &cfg, seed).unwrap().grad);
        hz.push(hozog_hypergradient(&problem, &x, &y0, &cfg, seed).unwrap().grad);
    }
    let variance = |grads: &[Array1<f64>]| {
        let mut mean: Array1<f64> = Array1::zeros(50);
        for g in grads {
            mean += g;
        }
        mean /= grads.len() as f64;
        grads
            .iter()
            .map(|g| {
                let d = g - &mean;
                d.dot(&d)
            })
            .sum::<f64>()
            / grads.len() as f64
    };
    let var_pz = variance(&pz);
    let var_hz = variance(&hz);
    assert!(
        var_hz > var_pz,
        "full-smoothing variance {var_hz} should exceed partial {var_pz}"
    );
}

#[test]
fn single_precision_instantiation_agrees_with_double() {
    // The whole stack is generic over the scalar; the f32 path must land on
    // the f64 result to single-precision accuracy on a mild instance.
    let p64: QuadraticProblem<f64> = quadratic_make(3, 4, 4, 3.0).unwrap();
    let p32: QuadraticProblem<f32> = quadratic_make(3, 4, 4, 3.0).unwrap();
    let x64 = seeding::gaussian_vector::<f64>(&mut seeding::stream(5, &[seeding::TAG_INIT]), 4);
    let x32 = x64.mapv(|v| v as f32);
    let cfg64 = EstimatorConfig::new(40, 8, 1e-2, 0.2);
    let cfg32 = EstimatorConfig::new(40, 8, 1e-2f32, 0.2f32);
    let e64 = pzobo_hypergradient(&p64, &x64, &Array1::zeros(4), &cfg64, 11).unwrap();
    let e32 = pzobo_hypergradient(&p32, &x32, &Array1::zeros(4), &cfg32, 11).unwrap();
    // Same substreams feed both precisions, so only rounding separates them.
    let diff = e64
        .grad
        .iter()
        .zip(e32.grad.iter())
        .map(|(a, b)| (a - *b as f64).abs())
        .fold(0.0f64, f64::max);
    assert!(diff < 1e-3, "precision gap {diff}");
    let o32 = oracle_hypergradient(&p32, &x32).unwrap();
    assert!(o32.grad.iter().all(|v| v.is_finite()));
}

#[test]
fn pzobo_is_a_descent_direction_on_hyper_representation() {
    let data =
        generate_hr_dataset::<f64>(1, 30, 30, 8, 4, 0.1, EmbeddingKind::Linear, 0.1).unwrap();
    let problem = HrProblem::new(data);
    let p = problem.outer_dim();
    let mut rng = seeding::stream(58, &[seeding::TAG_INIT]);
    let x = problem.sample_initial(&mut rng);
    let y0 = Array1::zeros(problem.inner_dim());
    // Reference gradient: central differences of the solved outer objective.
    let reference = fd_hypergradient(
        &problem,
        &x,
        &InnerSettings {
            step_size: 0.001,
            steps: 200,
            y_init: y0.clone(),
        },
        1e-5,
    )
    .unwrap();
    assert!(l2_norm(&reference) > 0.0);
    let cfg = EstimatorConfig::new(20, 1, 0.01, 0.001);
    let mut descents = 0;
    let seeds = 100;
    for s in 0..seeds {
        let est = pzobo_hypergradient(&problem, &x, &y0, &cfg, 40_000 + s).unwrap();
        assert!(est.grad.iter().all(|v| v.is_finite()));
        assert_eq!(est.evals.inner_grad, 2 * 20);
        if est.grad.dot(&reference) > 0.0 {
            descents += 1;
        }
    }
    assert!(
        descents >= 90,
        "descent direction in only {descents}/{seeds} seeds (p = {p})"
    );
}
