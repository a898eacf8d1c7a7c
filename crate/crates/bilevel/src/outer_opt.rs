//! Outer-variable update rules: plain gradient descent and bias-corrected
//! Adam.

use ndarray::Array1;

use crate::scalar::Scalar;

/// Adam coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams<T> {
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for AdamParams<T> {
    fn default() -> Self {
        AdamParams {
            beta1: T::cst(0.9),
            beta2: T::cst(0.999),
            epsilon: T::cst(1e-8),
        }
    }
}

/// Outer iterate plus the moment state used by Adam. Moments start at zero
/// and the step counter at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterState<T> {
    pub x: Array1<T>,
    pub first_moment: Array1<T>,
    pub second_moment: Array1<T>,
    pub step_count: u64,
    pub params: AdamParams<T>,
}

impl<T: Scalar> OuterState<T> {
    pub fn new(x: Array1<T>) -> Self {
        let dim = x.len();
        OuterState {
            x,
            first_moment: Array1::zeros(dim),
            second_moment: Array1::zeros(dim),
            step_count: 0,
            params: AdamParams::default(),
        }
    }

    /// `x ← x − β · grad`.
    pub fn gd_step(&mut self, grad: &Array1<T>, step_size: T) {
        self.x = &self.x - &(grad * step_size);
    }

    /// Standard bias-corrected Adam update.
    pub fn adam_step(&mut self, grad: &Array1<T>, lr: T) {
        let AdamParams {
            beta1,
            beta2,
            epsilon,
        } = self.params;
        self.step_count += 1;
        let one = T::one();
        self.first_moment = &(&self.first_moment * beta1) + &(grad * (one - beta1));
        self.second_moment =
            &(&self.second_moment * beta2) + &(&grad.mapv(|g| g * g) * (one - beta2));
        let t = self.step_count as i32;
        let m_hat = &self.first_moment / (one - beta1.powi(t));
        let v_hat = &self.second_moment / (one - beta2.powi(t));
        let update = &m_hat / &v_hat.mapv(|v| v.sqrt() + epsilon);
        self.x = &self.x - &(&update * lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn gd_step_matches_hand_computation_and_is_linear() {
        let mut s = OuterState::<f64>::new(arr1(&[1.0, 1.0]));
        s.gd_step(&arr1(&[0.25, 0.25]), 1.0);
        assert_eq!(s.x, arr1(&[0.75, 0.75]));
        s.gd_step(&arr1(&[0.0, 0.0]), 0.5);
        assert_eq!(s.x, arr1(&[0.75, 0.75]));

        // Linearity in the gradient argument.
        let g1: Array1<f64> = arr1(&[0.3, -0.7]);
        let g2: Array1<f64> = arr1(&[-0.1, 0.2]);
        let mut a = OuterState::<f64>::new(arr1(&[2.0, -1.0]));
        a.gd_step(&(&g1 + &g2), 0.4);
        let mut b = OuterState::<f64>::new(arr1(&[2.0, -1.0]));
        b.gd_step(&g1, 0.4);
        b.gd_step(&g2, 0.4);
        assert!(a.x.iter().zip(b.x.iter()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude_and_gradient_sign() {
        for &g in &[3.0, -0.02, 1e-6] {
            let mut s = OuterState::<f64>::new(arr1(&[0.0]));
            s.adam_step(&arr1(&[g]), 0.05);
            // First bias-corrected step is lr·g/(|g| + ε') ≈ lr·sign(g).
            assert!((s.x[0].abs() - 0.05).abs() < 0.05 * 1e-2, "step {}", s.x[0]);
            assert_eq!(s.x[0] < 0.0, g > 0.0);
        }
        let mut s = OuterState::<f64>::new(arr1(&[1.25]));
        for _ in 0..10 {
            s.adam_step(&arr1(&[0.0]), 0.05);
        }
        assert_eq!(s.x, arr1(&[1.25]));

        // Direction-wise scale invariance: on the first step every
        // coordinate moves by ≈ lr against the gradient sign, whatever the
        // gradient magnitudes.
        let grad = arr1(&[1e3, -1e-4, 0.2, -7.0]);
        let mut s = OuterState::<f64>::new(Array1::zeros(4));
        s.adam_step(&grad, 0.05);
        for (step, g) in s.x.iter().zip(grad.iter()) {
            assert_eq!(step < &0.0, g > &0.0);
            assert!((step.abs() - 0.05).abs() < 0.05 * 1e-2);
        }
    }

    #[test]
    fn adam_contracts_a_convex_scalar_objective() {
        // 100 steps on ½‖x‖² shrink the iterate by well over 10×.
        let mut s = OuterState::<f64>::new(arr1(&[5.0]));
        for _ in 0..100 {
            let grad = s.x.clone();
            s.adam_step(&grad, 0.1);
        }
        assert!(s.x[0].abs() <= 0.5, "final iterate {}", s.x[0]);
    }
}
