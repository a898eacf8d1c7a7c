//! Problem interface and the three concrete problem families.
//!
//! A bilevel problem minimizes an outer objective `f(x, y*(x))` subject to
//! `y*(x)` minimizing an inner objective `g(x, ·)`. Implementations expose the
//! first-order evaluations every estimator needs, plus optional second-order
//! actions (for the implicit-differentiation baselines), a closed-form oracle
//! (quadratic family only), and smoothness constants.

mod hyperrep;
mod logistic;
mod quadratic;

pub use hyperrep::{generate_hr_dataset, EmbeddingKind, HrDataset, HrProblem};
pub use logistic::{generate_ho_dataset, HoDataset, HoProblem};
pub use quadratic::{quadratic_make, QuadraticProblem};

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

/// Minibatch of component indices; `None` means the full batch.
///
/// On finite-sum problems the deterministic objective *is* the full-batch
/// mean, and implementations must evaluate `None` and `Some(all indices in
/// ascending order)` through the identical floating-point path so the two are
/// bit-equal.
pub type Batch<'a> = Option<&'a [usize]>;

/// Closed-form evaluation at a point: inner minimizer, response Jacobian
/// `∂y*/∂x` (d×p), and the exact hypergradient.
#[derive(Debug, Clone)]
pub struct OracleEval<T> {
    pub y_star: Array1<T>,
    pub jacobian: Array2<T>,
    pub hypergrad: Array1<T>,
}

/// One bilevel problem instance.
pub trait BilevelProblem<T: Scalar>: Send + Sync {
    /// Dimension of the outer variable `x`.
    fn outer_dim(&self) -> usize;
    /// Dimension of the inner variable `y`.
    fn inner_dim(&self) -> usize;
    /// Number of inner finite-sum components (1 for deterministic problems).
    fn inner_sample_count(&self) -> usize {
        1
    }
    /// Number of outer finite-sum components (1 for deterministic problems).
    fn outer_sample_count(&self) -> usize {
        1
    }

    /// Inner objective value `g` (or minibatch mean `G`).
    fn inner_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T;
    /// Inner gradient `∇_y g` (or minibatch mean).
    fn inner_grad_y(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T>;
    /// Outer objective value `f` (or minibatch mean `F`).
    fn outer_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T;
    /// Outer gradient in `x`.
    fn outer_grad_x(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T>;
    /// Outer gradient in `y`.
    fn outer_grad_y(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T>;

    /// Whether `hess_vec`/`cross_vec` are available.
    fn has_second_order(&self) -> bool {
        false
    }
    /// Inner Hessian action `∇²_y g(x,y) · v` (full batch), when available.
    fn hess_vec(&self, _x: &Array1<T>, _y: &Array1<T>, _v: &Array1<T>) -> Option<Array1<T>> {
        None
    }
    /// Mixed-derivative transpose action `(∇_x ∇_y g)ᵀ v` as a p-vector.
    fn cross_vec(&self, _x: &Array1<T>, _y: &Array1<T>, _v: &Array1<T>) -> Option<Array1<T>> {
        None
    }

    /// Whether a closed-form oracle is available.
    fn has_oracle(&self) -> bool {
        false
    }
    /// Closed-form `(y*, ∂y*/∂x, ∇Φ)` when the family admits one.
    fn oracle(&self, _x: &Array1<T>) -> Option<OracleEval<T>> {
        None
    }

    /// Smoothness/convexity constants, when the family computes them.
    fn constants(&self) -> Option<ConstantsBundle<T>> {
        None
    }
}

/// Smoothness and convexity constants of one problem, plus the derived
/// Jacobian/hypergradient constants used by the convergence probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsBundle<T> {
    /// Gradient Lipschitz constant `L = max{L_f, L_g}`.
    pub grad_lipschitz: T,
    /// Inner strong-convexity constant.
    pub strong_convexity: T,
    /// Lipschitz constant of the inner Hessian (0 for quadratics).
    pub hessian_lipschitz: T,
    /// Lipschitz constant of the mixed derivative (0 for quadratics).
    pub mixed_lipschitz: T,
    /// Outer-value Lipschitz bound over the documented probe box.
    pub value_lipschitz: T,
    /// Bound on the inner-minimizer norm over the probe box.
    pub minimizer_bound: T,
    /// Derived Lipschitz constant of the N-step response Jacobian.
    pub jacobian_lipschitz: T,
    /// Derived Lipschitz constant of the hypergradient.
    pub hypergrad_lipschitz: T,
    /// Derived bound on the hypergradient norm.
    pub hypergrad_bound: T,
}

impl<T: Scalar> ConstantsBundle<T> {
    /// Assemble the bundle, deriving the Jacobian and hypergradient constants
    /// from the primitive ones.
    pub fn derive(
        grad_lipschitz: T,
        strong_convexity: T,
        hessian_lipschitz: T,
        mixed_lipschitz: T,
        value_lipschitz: T,
        minimizer_bound: T,
    ) -> Self {
        let l = grad_lipschitz;
        let mu = strong_convexity;
        let rho = hessian_lipschitz;
        let tau = mixed_lipschitz;
        let m = value_lipschitz;
        let jacobian_lipschitz = (T::one() + l / mu) * (tau / mu + rho * l / (mu * mu));
        let hypergrad_lipschitz = l
            + (T::cst(2.0) * l * l + tau * m * m) / mu
            + (rho * l * m + l * l * l + tau * m * l) / (mu * mu)
            + rho * l * l * m / (mu * mu * mu);
        let hypergrad_bound = (T::one() + l / mu) * m;
        ConstantsBundle {
            grad_lipschitz,
            strong_convexity,
            hessian_lipschitz,
            mixed_lipschitz,
            value_lipschitz,
            minimizer_bound,
            jacobian_lipschitz,
            hypergrad_lipschitz,
            hypergrad_bound,
        }
    }
}

/// Resolve a batch against the component count: full range when `None`.
pub(crate) fn batch_indices<'a>(batch: Batch<'a>, all: &'a [usize]) -> &'a [usize] {
    batch.unwrap_or(all)
}
