//! Small dense linear-algebra helpers for the desk-scale problems in this
//! crate: random orthogonal matrices, symmetric eigenvalues (cyclic Jacobi),
//! Cholesky factorization, and power-iteration spectral norms. Everything is
//! self-contained so the crate needs no BLAS/LAPACK backend.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Outer product `a bᵀ`.
pub fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            m[[i, j]] = ai * bj;
        }
    }
    m
}

/// Haar-ish random orthogonal matrix via Householder QR of a Gaussian matrix,
/// with the R-diagonal sign fix.
pub fn random_orthogonal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Array2<T> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = T::standard_normal(rng);
        }
    }
    let (q, r) = householder_qr(&a);
    // Multiply column j of Q by sign(R[j,j]) so the distribution is uniform.
    let mut q = q;
    for j in 0..n {
        if r[[j, j]] < T::zero() {
            for i in 0..n {
                q[[i, j]] = -q[[i, j]];
            }
        }
    }
    q
}

/// Householder QR of a square matrix; returns (Q, R) with Q orthogonal.
pub fn householder_qr<T: Scalar>(a: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "householder_qr expects a square matrix");
    let mut r = a.clone();
    let mut q = Array2::eye(n);
    for k in 0..n.saturating_sub(1) {
        // Householder vector for column k below the diagonal.
        let mut v = Array1::zeros(n - k);
        for i in k..n {
            v[i - k] = r[[i, k]];
        }
        let alpha = {
            let norm = v.dot(&v).sqrt();
            if v[0] >= T::zero() {
                -norm
            } else {
                norm
            }
        };
        if alpha == T::zero() {
            continue;
        }
        v[0] -= alpha;
        let vnorm2 = v.dot(&v);
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::cst(2.0);
        // R <- (I - 2 v vᵀ / vᵀv) R restricted to rows k..n
        for j in k..n {
            let mut dot = T::zero();
            for i in k..n {
                dot += v[i - k] * r[[i, j]];
            }
            let coef = two * dot / vnorm2;
            for i in k..n {
                r[[i, j]] -= coef * v[i - k];
            }
        }
        // Q <- Q (I - 2 v vᵀ / vᵀv) acting on columns k..n
        for i in 0..n {
            let mut dot = T::zero();
            for j in k..n {
                dot += q[[i, j]] * v[j - k];
            }
            let coef = two * dot / vnorm2;
            for j in k..n {
                q[[i, j]] -= coef * v[j - k];
            }
        }
    }
    (q, r)
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method, ascending.
pub fn sym_eigenvalues<T: Scalar>(m: &Array2<T>) -> Vec<T> {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    let mut a = m.clone();
    let tol = T::cst(1e-14) * frob(&a).max(T::one());
    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (T::cst(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<T> = (0..n).map(|i| a[[i, i]]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    eigs
}

fn frob<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<T: Scalar>(m: &Array2<T>) -> Option<Array2<T>> {
    let n = m.nrows();
    if n != m.ncols() {
        return None;
    }
    let mut l: Array2<T> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= T::zero() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `L Lᵀ x = b` given the lower Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Array2<T>, b: &Array1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Inverse of a symmetric positive-definite matrix via Cholesky solves.
pub fn spd_inverse<T: Scalar>(m: &Array2<T>) -> Option<Array2<T>> {
    let n = m.nrows();
    let l = cholesky(m)?;
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = T::one();
        let col = cholesky_solve(&l, &e);
        inv.column_mut(j).assign(&col);
    }
    Some(inv)
}

/// Spectral norm (largest singular value) by power iteration on `MᵀM` with a
/// fixed deterministic start vector.
pub fn spectral_norm<T: Scalar>(m: &Array2<T>, iters: usize) -> T {
    let cols = m.ncols();
    if cols == 0 || m.nrows() == 0 {
        return T::zero();
    }
    let mut v: Array1<T> =
        Array1::from_iter((0..cols).map(|i| T::cst(1.0 + (i as f64 * 0.37).sin())));
    for _ in 0..iters {
        let mv = m.dot(&v);
        let w = m.t().dot(&mv);
        let wnorm = w.dot(&w).sqrt();
        if wnorm == T::zero() {
            return T::zero();
        }
        v = w / wnorm;
    }
    let mv = m.dot(&v);
    mv.dot(&mv).sqrt()
}

/// Mean of a list of equally shaped matrices.
pub fn matrix_mean<T: Scalar>(mats: &[Array2<T>]) -> Array2<T> {
    let mut acc = Array2::zeros(mats[0].raw_dim());
    for m in mats {
        acc += m;
    }
    acc / T::cst(mats.len() as f64)
}

/// Column sums as a vector (used by bias gradients in the two-layer embedding).
pub fn column_sums<T: Scalar>(m: &Array2<T>) -> Array1<T> {
    m.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    #[test]
    fn qr_reconstructs_and_q_is_orthogonal() {
        let mut rng = seeding::stream(3, &[seeding::TAG_DATA]);
        let n = 8;
        let mut a: Array2<f64> = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = f64::standard_normal(&mut rng);
            }
        }
        let (q, r) = householder_qr(&a);
        let qr = q.dot(&r);
        let qtq = q.t().dot(&q);
        for i in 0..n {
            for j in 0..n {
                assert!((qr[[i, j]] - a[[i, j]]).abs() < 1e-10);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jacobi_recovers_constructed_spectrum() {
        let mut rng = seeding::stream(5, &[seeding::TAG_DATA]);
        let n = 6;
        let q: Array2<f64> = random_orthogonal(&mut rng, n);
        let eigs = [0.5, 1.0, 2.0, 3.5, 7.0, 9.0];
        let mut d = Array2::zeros((n, n));
        for (i, &e) in eigs.iter().enumerate() {
            d[[i, i]] = e;
        }
        let a = q.dot(&d).dot(&q.t());
        let found = sym_eigenvalues(&a);
        for (f, e) in found.iter().zip(eigs.iter()) {
            assert!((f - e).abs() < 1e-9, "eig {f} vs {e}");
        }
    }

    #[test]
    fn cholesky_solve_inverts() {
        let a: Array2<f64> =
            ndarray::arr2(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let l = cholesky(&a).expect("SPD");
        let b: Array1<f64> = ndarray::arr1(&[1.0, -2.0, 0.5]);
        let x = cholesky_solve(&l, &b);
        let r = a.dot(&x) - &b;
        assert!(r.dot(&r).sqrt() < 1e-12);
        let not_pd: Array2<f64> = ndarray::arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(cholesky(&not_pd).is_none());
    }

    #[test]
    fn spectral_norm_matches_eigenvalue_on_symmetric_input() {
        let a: Array2<f64> = ndarray::arr2(&[[3.0, 1.0], [1.0, 2.0]]);
        let eigs = sym_eigenvalues(&a);
        let top = eigs.last().copied().unwrap();
        assert!((spectral_norm(&a, 200) - top).abs() < 1e-8);
    }
}
