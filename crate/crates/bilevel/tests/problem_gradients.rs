//! Finite-difference checks of every problem family's analytic evaluations.

use bilevel::problems::{
    generate_hr_dataset, generate_ho_dataset, quadratic_make, BilevelProblem, EmbeddingKind,
    HoProblem, HrProblem, QuadraticProblem,
};
use bilevel::scalar::l2_norm;
use bilevel::seeding;
use ndarray::Array1;

fn fd_inner_grad<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    x: &Array1<f64>,
    y: &Array1<f64>,
    h: f64,
) -> Array1<f64> {
    let mut fd = Array1::zeros(y.len());
    for i in 0..y.len() {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[i] += h;
        ym[i] -= h;
        fd[i] = (problem.inner_value(x, &yp, None) - problem.inner_value(x, &ym, None)) / (2.0 * h);
    }
    fd
}

fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    l2_norm(&(a - b)) / l2_norm(b).max(1e-12)
}

fn check_first_order<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    x_scale: f64,
    probes: usize,
    label: &str,
) {
    let mut rng = seeding::stream(41, &[seeding::TAG_TRIAL]);
    for probe in 0..probes {
        let x = seeding::gaussian_vector::<f64>(&mut rng, problem.outer_dim()) * x_scale;
        let y: Array1<f64> = seeding::gaussian_vector(&mut rng, problem.inner_dim());
        let grad = problem.inner_grad_y(&x, &y, None);
        let fd = fd_inner_grad(problem, &x, &y, 1e-6);
        let err = rel_err(&grad, &fd);
        assert!(err < 1e-6, "{label} probe {probe}: inner grad fd error {err}");
    }
}

fn check_second_order<P: BilevelProblem<f64> + ?Sized>(problem: &P, x_scale: f64, label: &str) {
    let mut rng = seeding::stream(42, &[seeding::TAG_TRIAL]);
    let d = problem.inner_dim();
    let p = problem.outer_dim();
    for probe in 0..4 {
        let x = seeding::gaussian_vector::<f64>(&mut rng, p) * x_scale;
        let y: Array1<f64> = seeding::gaussian_vector(&mut rng, d);
        let v: Array1<f64> = seeding::gaussian_vector(&mut rng, d);
        let w: Array1<f64> = seeding::gaussian_vector(&mut rng, d);

        // Hessian action against directional finite differences of the inner
        // gradient.
        let h = 1e-5;
        let hv = problem.hess_vec(&x, &y, &v).expect("hess_vec");
        let gp = problem.inner_grad_y(&x, &(&y + &(&v * h)), None);
        let gm = problem.inner_grad_y(&x, &(&y - &(&v * h)), None);
        let fd = (&gp - &gm) / (2.0 * h);
        let err = rel_err(&hv, &fd);
        assert!(err < 1e-5, "{label} probe {probe}: hess_vec fd error {err}");

        // Symmetry of the Hessian action.
        let hw = problem.hess_vec(&x, &y, &w).expect("hess_vec");
        let lhs = hv.dot(&w);
        let rhs = hw.dot(&v);
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0),
            "{label} probe {probe}: hess_vec asymmetry {lhs} vs {rhs}"
        );

        // Mixed-derivative transpose action: ⟨cross_vec(v), e_j⟩ equals the
        // x_j-derivative of ⟨∇_y g, v⟩.
        let cv = problem.cross_vec(&x, &y, &v).expect("cross_vec");
        let mut fd_cross = Array1::zeros(p);
        for j in 0..p {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let sp = problem.inner_grad_y(&xp, &y, None).dot(&v);
            let sm = problem.inner_grad_y(&xm, &y, None).dot(&v);
            fd_cross[j] = (sp - sm) / (2.0 * h);
        }
        let err = l2_norm(&(&cv - &fd_cross)) / l2_norm(&fd_cross).max(1e-8);
        assert!(err < 1e-5, "{label} probe {probe}: cross_vec fd error {err}");
    }
}

#[test]
fn quadratic_first_and_second_order_match_finite_differences() {
    let p: QuadraticProblem<f64> = quadratic_make(7, 6, 5, 8.0).unwrap();
    check_first_order(&p, 1.0, 10, "quadratic");
    check_second_order(&p, 1.0, "quadratic");
}

#[test]
fn finite_sum_quadratic_matches_finite_differences() {
    let p: QuadraticProblem<f64> = QuadraticProblem::finite_sum(13, 4, 5, 6.0, 12, 6, 0.4).unwrap();
    check_first_order(&p, 1.0, 6, "finite-sum quadratic");
    // Minibatch gradients also differentiate the minibatch value.
    let mut rng = seeding::stream(43, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 4);
    let y: Array1<f64> = seeding::gaussian_vector(&mut rng, 5);
    let batch = [1usize, 3, 7];
    let grad = p.inner_grad_y(&x, &y, Some(&batch));
    let h = 1e-6;
    let mut fd = Array1::zeros(5);
    for i in 0..5 {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[i] += h;
        ym[i] -= h;
        fd[i] = (p.inner_value(&x, &yp, Some(&batch)) - p.inner_value(&x, &ym, Some(&batch)))
            / (2.0 * h);
    }
    assert!(rel_err(&grad, &fd) < 1e-6);
}

#[test]
fn hyper_representation_matches_finite_differences() {
    let data = generate_hr_dataset::<f64>(1, 20, 24, 8, 5, 0.1, EmbeddingKind::Linear, 0.1).unwrap();
    let p = HrProblem::new(data);
    check_first_order(&p, 1.0, 6, "hr-linear");
    check_second_order(&p, 1.0, "hr-linear");

    let data = generate_hr_dataset::<f64>(
        1,
        20,
        24,
        8,
        5,
        0.1,
        EmbeddingKind::TwoLayer { hidden: 6 },
        0.1,
    )
    .unwrap();
    let p = HrProblem::new(data);
    check_first_order(&p, 0.5, 6, "hr-two-layer");
    check_second_order(&p, 0.5, "hr-two-layer");
}

#[test]
fn ho_logistic_matches_finite_differences() {
    let data = generate_ho_dataset::<f64>(3, 30, 20, 5, 3).unwrap();
    let p = HoProblem::new(data);
    check_first_order(&p, 0.5, 6, "ho-logistic");
    check_second_order(&p, 0.5, "ho-logistic");
}

#[test]
fn quadratic_strong_convexity_monotonicity_probe() {
    let p: QuadraticProblem<f64> = quadratic_make(5, 4, 6, 10.0).unwrap();
    let (mu, _) = p.curvature_range();
    let mut rng = seeding::stream(44, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 4);
    for _ in 0..10 {
        let y1: Array1<f64> = seeding::gaussian_vector(&mut rng, 6);
        let y2: Array1<f64> = seeding::gaussian_vector(&mut rng, 6);
        let g1 = p.inner_grad_y(&x, &y1, None);
        let g2 = p.inner_grad_y(&x, &y2, None);
        let dy = &y1 - &y2;
        assert!((&g1 - &g2).dot(&dy) >= mu * dy.dot(&dy) * (1.0 - 1e-10));
    }
}

#[test]
fn quadratic_oracle_matches_finite_difference_hypergradient() {
    // Random instance at the dimensions where the closed form is the sole
    // reference.
    let p: QuadraticProblem<f64> = quadratic_make(7, 10, 10, 10.0).unwrap();
    let mut rng = seeding::stream(45, &[seeding::TAG_TRIAL]);
    let x = seeding::gaussian_vector::<f64>(&mut rng, 10);
    let oracle = p.oracle(&x).unwrap();
    let h = 1e-6;
    let mut fd = Array1::zeros(10);
    for j in 0..10 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = p.outer_value(&xp, &p.minimizer(&xp), None);
        let fm = p.outer_value(&xm, &p.minimizer(&xm), None);
        fd[j] = (fp - fm) / (2.0 * h);
    }
    let err = rel_err(&oracle.hypergrad, &fd);
    assert!(err < 1e-6, "oracle vs finite differences: {err}");
}
