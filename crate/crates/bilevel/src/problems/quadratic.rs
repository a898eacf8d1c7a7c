//! Quadratic bilevel family with a closed-form oracle.
//!
//! Inner objective `g(x,y) = ½ yᵀA y − (Bx + c)ᵀ y` with `A` symmetric
//! positive definite, outer objective `f(x,y) = ½‖y − y_t‖² + ½ r ‖x‖²`.
//! The inner minimizer, response Jacobian, and hypergradient are all closed
//! form, which makes this family the verification oracle for every estimator:
//!
//! * `y*(x) = A⁻¹(Bx + c)`
//! * `∂y*/∂x = A⁻¹B`
//! * `∇Φ(x) = r·x + (A⁻¹B)ᵀ (y*(x) − y_t)`
//!
//! An optional finite-sum form averages `m` perturbed copies of `(A, B, c)`
//! (and `n` outer copies of `y_t`) whose perturbations sum to zero, so the
//! full-batch mean reproduces the deterministic problem exactly.

use ndarray::linalg::general_mat_vec_mul;
use ndarray::{Array1, Array2};

use super::{batch_indices, Batch, BilevelProblem, ConstantsBundle, OracleEval};
use crate::error::{BilevelError, Result};
use crate::linalg;
use crate::scalar::{l2_norm, Scalar};
use crate::seeding;

/// Default outer regularization coefficient used by [`quadratic_make`].
pub const DEFAULT_OUTER_REG: f64 = 0.1;
/// Radius of the probe box `‖x‖ ≤ R` over which the value-Lipschitz and
/// minimizer bounds are computed.
pub const PROBE_RADIUS: f64 = 10.0;

struct InnerComponents<T> {
    a: Vec<Array2<T>>,
    b: Vec<Array2<T>>,
    c: Vec<Array1<T>>,
}

pub struct QuadraticProblem<T> {
    a: Array2<T>,
    a_inv: Array2<T>,
    b: Array2<T>,
    c: Array1<T>,
    y_target: Array1<T>,
    reg: T,
    mu_g: T,
    l_g: T,
    inner_parts: Option<InnerComponents<T>>,
    outer_targets: Option<Vec<Array1<T>>>,
    all_inner: Vec<usize>,
    all_outer: Vec<usize>,
}

impl<T: Scalar> QuadraticProblem<T> {
    /// Build a problem from explicit matrices. `a` must be symmetric positive
    /// definite.
    pub fn from_parts(
        a: Array2<T>,
        b: Array2<T>,
        c: Array1<T>,
        y_target: Array1<T>,
        reg: T,
    ) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || c.len() != d || y_target.len() != d {
            return Err(BilevelError::InvalidConfig(
                "inconsistent quadratic dimensions".into(),
            ));
        }
        let tol = T::cst(1e-10);
        for i in 0..d {
            for j in 0..d {
                if (a[[i, j]] - a[[j, i]]).abs() > tol {
                    return Err(BilevelError::InvalidConfig(
                        "inner curvature matrix is not symmetric".into(),
                    ));
                }
            }
        }
        let a_inv = linalg::spd_inverse(&a).ok_or_else(|| {
            BilevelError::InvalidConfig("inner curvature matrix is not positive definite".into())
        })?;
        let eigs = linalg::sym_eigenvalues(&a);
        let mu_g = eigs[0];
        let l_g = *eigs.last().expect("non-empty spectrum");
        Ok(QuadraticProblem {
            a,
            a_inv,
            b,
            c,
            y_target,
            reg,
            mu_g,
            l_g,
            inner_parts: None,
            outer_targets: None,
            all_inner: vec![0],
            all_outer: vec![0],
        })
    }

    /// Finite-sum variant: `inner_components` copies of `(A, B, c)` and
    /// `outer_components` copies of `y_t`, each perturbed by zero-mean noise
    /// of relative size `spread` (spectral perturbations capped below the
    /// strong-convexity constant so every component stays positive definite).
    pub fn finite_sum(
        seed: u64,
        p: usize,
        d: usize,
        conditioning: f64,
        inner_components: usize,
        outer_components: usize,
        spread: f64,
    ) -> Result<Self> {
        if inner_components < 1 || outer_components < 1 {
            return Err(BilevelError::InvalidConfig(
                "component counts must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&spread) {
            return Err(BilevelError::InvalidConfig(
                "component spread must lie in [0, 1)".into(),
            ));
        }
        let mut problem = quadratic_make(seed, p, d, conditioning)?;
        let m = inner_components;
        let n = outer_components;
        if m > 1 {
            let mut rng = seeding::stream(seed, &[seeding::TAG_DATA, 1]);
            let spread_t = T::cst(spread);
            // Symmetric zero-mean curvature perturbations.
            let mut sym: Vec<Array2<T>> = (0..m)
                .map(|_| {
                    let mut g: Array2<T> = Array2::zeros((d, d));
                    for i in 0..d {
                        for j in 0..d {
                            g[[i, j]] = T::standard_normal(&mut rng);
                        }
                    }
                    let gt = g.t().to_owned();
                    (g + gt) / T::cst(2.0)
                })
                .collect();
            let mean = linalg::matrix_mean(&sym);
            for s in sym.iter_mut() {
                *s = &*s - &mean;
            }
            let max_norm = sym
                .iter()
                .map(|s| linalg::spectral_norm(s, 60))
                .fold(T::zero(), T::max);
            let scale = if max_norm > T::zero() {
                spread_t * problem.mu_g / max_norm
            } else {
                T::zero()
            };
            let a_parts: Vec<Array2<T>> = sym.iter().map(|s| &problem.a + &(s * scale)).collect();

            let b_scale = T::cst(1.0 / (p.max(d) as f64).sqrt());
            let mut b_noise: Vec<Array2<T>> = (0..m)
                .map(|_| {
                    let mut g: Array2<T> = Array2::zeros((d, p));
                    for i in 0..d {
                        for j in 0..p {
                            g[[i, j]] = T::standard_normal(&mut rng) * b_scale;
                        }
                    }
                    g
                })
                .collect();
            let b_mean = linalg::matrix_mean(&b_noise);
            for g in b_noise.iter_mut() {
                *g = &*g - &b_mean;
            }
            let b_parts: Vec<Array2<T>> =
                b_noise.iter().map(|g| &problem.b + &(g * spread_t)).collect();

            let mut c_noise: Vec<Array1<T>> = (0..m)
                .map(|_| seeding::gaussian_vector(&mut rng, d))
                .collect();
            let c_mean = vector_mean(&c_noise);
            for v in c_noise.iter_mut() {
                *v = &*v - &c_mean;
            }
            let c_parts: Vec<Array1<T>> =
                c_noise.iter().map(|v| &problem.c + &(v * spread_t)).collect();

            problem.inner_parts = Some(InnerComponents {
                a: a_parts,
                b: b_parts,
                c: c_parts,
            });
            problem.all_inner = (0..m).collect();
        }
        if n > 1 {
            let mut rng = seeding::stream(seed, &[seeding::TAG_DATA, 2]);
            let spread_t = T::cst(spread);
            let mut noise: Vec<Array1<T>> = (0..n)
                .map(|_| seeding::gaussian_vector(&mut rng, d))
                .collect();
            let mean = vector_mean(&noise);
            for v in noise.iter_mut() {
                *v = &*v - &mean;
            }
            problem.outer_targets = Some(
                noise
                    .iter()
                    .map(|v| &problem.y_target + &(v * spread_t))
                    .collect(),
            );
            problem.all_outer = (0..n).collect();
        }
        Ok(problem)
    }

    /// Exact inner minimizer `A⁻¹(Bx + c)` of the mean problem.
    pub fn minimizer(&self, x: &Array1<T>) -> Array1<T> {
        self.a_inv.dot(&(self.b.dot(x) + &self.c))
    }

    /// Exact response Jacobian `A⁻¹B`.
    pub fn response_jacobian(&self) -> Array2<T> {
        self.a_inv.dot(&self.b)
    }

    pub fn curvature(&self) -> &Array2<T> {
        &self.a
    }

    pub fn coupling(&self) -> &Array2<T> {
        &self.b
    }

    pub fn outer_reg(&self) -> T {
        self.reg
    }

    /// Extreme eigenvalues of `A` as `(mu_g, L_g)`.
    pub fn curvature_range(&self) -> (T, T) {
        (self.mu_g, self.l_g)
    }

    fn deterministic_inner_grad(&self, x: &Array1<T>, y: &Array1<T>) -> Array1<T> {
        self.a.dot(y) - self.b.dot(x) - &self.c
    }
}

fn vector_mean<T: Scalar>(vs: &[Array1<T>]) -> Array1<T> {
    let mut acc = Array1::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    acc / T::cst(vs.len() as f64)
}

impl<T: Scalar> BilevelProblem<T> for QuadraticProblem<T> {
    fn outer_dim(&self) -> usize {
        self.b.ncols()
    }

    fn inner_dim(&self) -> usize {
        self.a.nrows()
    }

    fn inner_sample_count(&self) -> usize {
        self.all_inner.len()
    }

    fn outer_sample_count(&self) -> usize {
        self.all_outer.len()
    }

    fn inner_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T {
        match &self.inner_parts {
            None => T::cst(0.5) * y.dot(&self.a.dot(y)) - (self.b.dot(x) + &self.c).dot(y),
            Some(parts) => {
                let idx = batch_indices(batch, &self.all_inner);
                let mut acc = T::zero();
                for &i in idx {
                    acc += T::cst(0.5) * y.dot(&parts.a[i].dot(y))
                        - (parts.b[i].dot(x) + &parts.c[i]).dot(y);
                }
                acc / T::cst(idx.len() as f64)
            }
        }
    }

    fn inner_grad_y(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        match &self.inner_parts {
            None => self.deterministic_inner_grad(x, y),
            Some(parts) => {
                let idx = batch_indices(batch, &self.all_inner);
                let mut acc = Array1::zeros(y.len());
                for &i in idx {
                    general_mat_vec_mul(T::one(), &parts.a[i], y, T::one(), &mut acc);
                    general_mat_vec_mul(-T::one(), &parts.b[i], x, T::one(), &mut acc);
                    acc -= &parts.c[i];
                }
                acc / T::cst(idx.len() as f64)
            }
        }
    }

    fn outer_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T {
        let reg_term = T::cst(0.5) * self.reg * x.dot(x);
        match &self.outer_targets {
            None => {
                let r = y - &self.y_target;
                T::cst(0.5) * r.dot(&r) + reg_term
            }
            Some(targets) => {
                let idx = batch_indices(batch, &self.all_outer);
                let mut acc = T::zero();
                for &i in idx {
                    let r = y - &targets[i];
                    acc += T::cst(0.5) * r.dot(&r);
                }
                acc / T::cst(idx.len() as f64) + reg_term
            }
        }
    }

    fn outer_grad_x(&self, x: &Array1<T>, _y: &Array1<T>, _batch: Batch<'_>) -> Array1<T> {
        x * self.reg
    }

    fn outer_grad_y(&self, _x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        match &self.outer_targets {
            None => y - &self.y_target,
            Some(targets) => {
                let idx = batch_indices(batch, &self.all_outer);
                let mut acc = Array1::zeros(y.len());
                for &i in idx {
                    acc = acc + (y - &targets[i]);
                }
                acc / T::cst(idx.len() as f64)
            }
        }
    }

    fn has_second_order(&self) -> bool {
        true
    }

    fn hess_vec(&self, _x: &Array1<T>, _y: &Array1<T>, v: &Array1<T>) -> Option<Array1<T>> {
        Some(self.a.dot(v))
    }

    fn cross_vec(&self, _x: &Array1<T>, _y: &Array1<T>, v: &Array1<T>) -> Option<Array1<T>> {
        // ∂_x ∂_y g = −B (d×p), so the transpose action is −Bᵀ v.
        Some(-self.b.t().dot(v))
    }

    fn has_oracle(&self) -> bool {
        true
    }

    fn oracle(&self, x: &Array1<T>) -> Option<OracleEval<T>> {
        let y_star = self.minimizer(x);
        let jacobian = self.response_jacobian();
        let hypergrad = x * self.reg + jacobian.t().dot(&(&y_star - &self.y_target));
        Some(OracleEval {
            y_star,
            jacobian,
            hypergrad,
        })
    }

    fn constants(&self) -> Option<ConstantsBundle<T>> {
        let l_f = T::one().max(self.reg);
        let l = l_f.max(self.l_g);
        let radius = T::cst(PROBE_RADIUS);
        let b_norm = linalg::spectral_norm(&self.b, 80);
        let minimizer_bound = (b_norm * radius + l2_norm(&self.c)) / self.mu_g;
        let grad_x = self.reg * radius;
        let grad_y = minimizer_bound + l2_norm(&self.y_target);
        let value_lipschitz = (grad_x * grad_x + grad_y * grad_y).sqrt();
        Some(ConstantsBundle::derive(
            l,
            self.mu_g,
            T::zero(),
            T::zero(),
            value_lipschitz,
            minimizer_bound,
        ))
    }
}

/// Seeded quadratic instance: `A` has eigenvalues evenly spread over
/// `[1, conditioning]` in a random orthogonal basis, `B`, `c`, and the outer
/// target are Gaussian, and the outer regularization is
/// [`DEFAULT_OUTER_REG`].
pub fn quadratic_make<T: Scalar>(
    seed: u64,
    p: usize,
    d: usize,
    conditioning: f64,
) -> Result<QuadraticProblem<T>> {
    if p < 1 || d < 1 {
        return Err(BilevelError::InvalidConfig(
            "dimensions must be at least 1".into(),
        ));
    }
    if conditioning < 1.0 {
        return Err(BilevelError::InvalidConfig(format!(
            "conditioning must be >= 1, got {conditioning}"
        )));
    }
    let mut rng = seeding::stream(seed, &[seeding::TAG_DATA, 0]);
    let eigs: Vec<T> = if d == 1 {
        vec![T::one()]
    } else {
        (0..d)
            .map(|i| T::cst(1.0 + (conditioning - 1.0) * i as f64 / (d - 1) as f64))
            .collect()
    };
    let q: Array2<T> = linalg::random_orthogonal(&mut rng, d);
    let mut diag = Array2::zeros((d, d));
    let mut diag_inv = Array2::zeros((d, d));
    for (i, &e) in eigs.iter().enumerate() {
        diag[[i, i]] = e;
        diag_inv[[i, i]] = T::one() / e;
    }
    let a = q.dot(&diag).dot(&q.t());
    let a_inv = q.dot(&diag_inv).dot(&q.t());
    let b_scale = T::cst(1.0 / (p.max(d) as f64).sqrt());
    let mut b = Array2::zeros((d, p));
    for i in 0..d {
        for j in 0..p {
            b[[i, j]] = T::standard_normal(&mut rng) * b_scale;
        }
    }
    let c = seeding::gaussian_vector(&mut rng, d);
    let y_target = seeding::gaussian_vector(&mut rng, d);
    Ok(QuadraticProblem {
        a,
        a_inv,
        b,
        c,
        y_target,
        reg: T::cst(DEFAULT_OUTER_REG),
        mu_g: eigs[0],
        l_g: *eigs.last().expect("non-empty spectrum"),
        inner_parts: None,
        outer_targets: None,
        all_inner: vec![0],
        all_outer: vec![0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn two_by_two() -> QuadraticProblem<f64> {
        QuadraticProblem::from_parts(
            arr2(&[[2.0, 0.0], [0.0, 2.0]]),
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            arr1(&[0.0, 0.0]),
            arr1(&[0.0, 0.0]),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_matches_hand_computation() {
        let p = two_by_two();
        let x = arr1(&[1.0, 1.0]);
        let o = p.oracle(&x).unwrap();
        let expect_y = arr1(&[0.5, 0.5]);
        let expect_j = arr2(&[[0.5, 0.0], [0.0, 0.5]]);
        let expect_g = arr1(&[0.25, 0.25]);
        assert!(l2_norm(&(&o.y_star - &expect_y)) < 1e-15);
        assert!((&o.jacobian - &expect_j).iter().all(|v| v.abs() < 1e-15));
        assert!(l2_norm(&(&o.hypergrad - &expect_g)) < 1e-15);
        // The minimizer zeroes the inner gradient.
        let g = p.inner_grad_y(&x, &o.y_star, None);
        assert!(l2_norm(&g) < 1e-14);
    }

    #[test]
    fn decoupled_inner_problem_has_zero_jacobian() {
        let p = QuadraticProblem::from_parts(
            arr2(&[[2.0, 0.0], [0.0, 3.0]]),
            Array2::zeros((2, 3)),
            arr1(&[1.0, -1.0]),
            arr1(&[0.0, 0.0]),
            0.7,
        )
        .unwrap();
        let x = arr1(&[0.3, -2.0, 5.0]);
        let o = p.oracle(&x).unwrap();
        assert!(o.jacobian.iter().all(|&v| v == 0.0));
        assert_eq!(o.hypergrad, &x * 0.7);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(quadratic_make::<f64>(0, 3, 3, 0.5).is_err());
        assert!(quadratic_make::<f64>(0, 0, 3, 2.0).is_err());
        let not_sym = arr2(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(
            QuadraticProblem::from_parts(not_sym, Array2::eye(2), arr1(&[0.0; 2]), arr1(&[0.0; 2]), 0.0)
                .is_err()
        );
        let not_pd = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(
            QuadraticProblem::from_parts(not_pd, Array2::eye(2), arr1(&[0.0; 2]), arr1(&[0.0; 2]), 0.0)
                .is_err()
        );
    }

    #[test]
    fn finite_sum_full_batch_matches_deterministic_mean() {
        let p: QuadraticProblem<f64> =
            QuadraticProblem::finite_sum(9, 4, 5, 6.0, 16, 8, 0.4).unwrap();
        let x = arr1(&[0.1, -0.4, 0.9, 0.2]);
        let y = arr1(&[1.0, 0.0, -0.5, 0.3, 0.8]);
        let full = p.inner_grad_y(&x, &y, None);
        let base = p.deterministic_inner_grad(&x, &y);
        let diff = &full - &base;
        // Perturbations sum to zero, so the full-batch mean reproduces the
        // base gradient up to float roundoff.
        assert!(l2_norm(&diff) < 1e-12 * l2_norm(&base).max(1.0));
        // Every component stays strongly convex.
        let parts = p.inner_parts.as_ref().unwrap();
        for a in &parts.a {
            let eigs = linalg::sym_eigenvalues(a);
            assert!(eigs[0] > 0.0);
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a: QuadraticProblem<f64> = quadratic_make(7, 3, 4, 10.0).unwrap();
        let b: QuadraticProblem<f64> = quadratic_make(7, 3, 4, 10.0).unwrap();
        assert_eq!(a.a, b.a);
        assert_eq!(a.b, b.b);
        assert_eq!(a.c, b.c);
        let (mu, l) = a.curvature_range();
        assert!((mu - 1.0).abs() < 1e-12 && (l - 10.0).abs() < 1e-9);
    }
}
