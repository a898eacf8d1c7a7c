//! Inner-loop solvers: full-gradient descent and minibatch SGD over a fixed
//! batch path.
//!
//! The batch path is the stochastic estimators' core device: the base run and
//! every perturbed run consume the same batch sequence step for step, so two
//! runs differ only through the outer variable, never through sampling.

use ndarray::Array1;

use crate::error::{BilevelError, Result};
use crate::problems::BilevelProblem;
use crate::scalar::{all_finite, l2_norm, Scalar};
use crate::seeding;

/// Iterate-norm threshold that flags a diverged inner run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Ordered minibatch index sets, one per inner step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPath {
    batches: Vec<Vec<usize>>,
    sample_count: usize,
}

impl BatchPath {
    pub fn steps(&self) -> usize {
        self.batches.len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn batch(&self, step: usize) -> &[usize] {
        &self.batches[step]
    }
}

/// Draw `steps` batches of `batch_size` indices from `0..sample_count`,
/// without replacement within each batch. Indices are stored in ascending
/// order, so a full-size batch is exactly `0..sample_count` and minibatch
/// evaluation degenerates bit-for-bit to the full-batch path.
pub fn make_batch_path(
    seed: u64,
    steps: usize,
    sample_count: usize,
    batch_size: usize,
) -> Result<BatchPath> {
    if batch_size < 1 || batch_size > sample_count {
        return Err(BilevelError::InvalidConfig(format!(
            "batch size {batch_size} out of range 1..={sample_count}"
        )));
    }
    let mut rng = seeding::stream(seed, &[seeding::TAG_INNER_BATCH]);
    let batches = (0..steps)
        .map(|_| {
            let mut idx = rand::seq::index::sample(&mut rng, sample_count, batch_size).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(BatchPath {
        batches,
        sample_count,
    })
}

/// Options for one inner run.
#[derive(Debug, Clone, Copy, Default)]
pub struct InnerRunOptions {
    /// Store the whole iterate sequence `y⁰…y^N` (required by ITD).
    pub keep_trajectory: bool,
    /// Evaluate `‖∇_y g(x, y^N)‖` after the run (one extra full-batch
    /// gradient, counted separately from the update budget).
    pub compute_residual: bool,
}

/// Result of one inner optimization run.
#[derive(Debug, Clone)]
pub struct InnerRun<T> {
    /// Final iterate `y^N`.
    pub solution: Array1<T>,
    /// `y⁰…y^N` when requested (length `N + 1`).
    pub trajectory: Option<Vec<Array1<T>>>,
    /// `‖∇_y g(x, y^N)‖` when requested.
    pub residual: Option<T>,
    /// Gradient evaluations spent on updates (exactly `N`).
    pub grad_evals: u64,
    /// Extra evaluations spent on diagnostics.
    pub diagnostic_evals: u64,
}

fn check_iterate<T: Scalar>(y: &Array1<T>, step: usize) -> Result<()> {
    let norm = l2_norm(y);
    if !all_finite(y) || norm.to_f64().is_none_or(|n| n > DIVERGENCE_LIMIT) {
        return Err(BilevelError::InnerDivergence {
            step,
            norm: norm.to_f64().unwrap_or(f64::INFINITY),
        });
    }
    Ok(())
}

/// `steps` full-gradient descent steps on the inner objective at fixed `x`.
pub fn gd_inner<T, P>(
    problem: &P,
    x: &Array1<T>,
    y0: &Array1<T>,
    step_size: T,
    steps: usize,
    opts: InnerRunOptions,
) -> Result<InnerRun<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    if step_size <= T::zero() {
        return Err(BilevelError::InvalidConfig(
            "inner step size must be positive".into(),
        ));
    }
    let mut y = y0.clone();
    let mut trajectory = opts.keep_trajectory.then(|| {
        let mut t = Vec::with_capacity(steps + 1);
        t.push(y.clone());
        t
    });
    for step in 0..steps {
        let grad = problem.inner_grad_y(x, &y, None);
        y = y - grad * step_size;
        check_iterate(&y, step)?;
        if let Some(t) = trajectory.as_mut() {
            t.push(y.clone());
        }
    }
    let (residual, diagnostic_evals) = if opts.compute_residual {
        (Some(l2_norm(&problem.inner_grad_y(x, &y, None))), 1)
    } else {
        (None, 0)
    };
    Ok(InnerRun {
        solution: y,
        trajectory,
        residual,
        grad_evals: steps as u64,
        diagnostic_evals,
    })
}

/// Minibatch SGD along `path` at fixed `x`. Reusing one path at `x` and at a
/// perturbed `x` makes the two runs consume identical batches step for step.
pub fn sgd_inner<T, P>(
    problem: &P,
    x: &Array1<T>,
    y0: &Array1<T>,
    step_size: T,
    path: &BatchPath,
    opts: InnerRunOptions,
) -> Result<InnerRun<T>>
where
    T: Scalar,
    P: BilevelProblem<T> + ?Sized,
{
    if step_size <= T::zero() {
        return Err(BilevelError::InvalidConfig(
            "inner step size must be positive".into(),
        ));
    }
    if path.sample_count() != problem.inner_sample_count() {
        return Err(BilevelError::InvalidConfig(format!(
            "batch path drawn for {} samples, problem has {}",
            path.sample_count(),
            problem.inner_sample_count()
        )));
    }
    let mut y = y0.clone();
    let mut trajectory = opts.keep_trajectory.then(|| {
        let mut t = Vec::with_capacity(path.steps() + 1);
        t.push(y.clone());
        t
    });
    for step in 0..path.steps() {
        let grad = problem.inner_grad_y(x, &y, Some(path.batch(step)));
        y = y - grad * step_size;
        check_iterate(&y, step)?;
        if let Some(t) = trajectory.as_mut() {
            t.push(y.clone());
        }
    }
    let (residual, diagnostic_evals) = if opts.compute_residual {
        (Some(l2_norm(&problem.inner_grad_y(x, &y, None))), 1)
    } else {
        (None, 0)
    };
    Ok(InnerRun {
        solution: y,
        trajectory,
        residual,
        grad_evals: path.steps() as u64,
        diagnostic_evals,
    })
}
