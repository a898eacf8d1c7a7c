//! Hyperparameter optimization on synthetic softmax data: one ℓ₂ penalty per
//! inner weight, reparameterized through `exp` so the outer variable is
//! unconstrained.
//!
//! * inner: `g(λ, w) = CE_train(w) + ½ Σ_j exp(λ_j) w_j²`
//! * outer: `f(λ, w) = CE_val(w)` (no direct dependence on λ)
//!
//! The classifier is affine (weights plus bias column), and `λ` has exactly
//! one entry per inner weight, so the two variables share a dimension.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::hyperrep::{push_matrix_section, push_vector_section};
use super::{Batch, BilevelProblem};
use crate::error::{BilevelError, Result};
use crate::scalar::Scalar;
use crate::seeding;

/// Scale of the ground-truth affine classifier weights.
const TRUTH_SCALE: f64 = 2.0;

/// Synthetic classification dataset for hyperparameter optimization.
#[derive(Debug, Clone)]
pub struct HoDataset<T> {
    /// Training features with a trailing bias column, `n_train × (features+1)`.
    pub train_x: Array2<T>,
    pub train_y: Vec<usize>,
    /// Validation features with a trailing bias column.
    pub val_x: Array2<T>,
    pub val_y: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl<T: Scalar> HoDataset<T> {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# ho-dataset,seed={},n_train={},n_val={},features={},classes={}\n",
            self.seed,
            self.train_x.nrows(),
            self.val_x.nrows(),
            self.train_x.ncols() - 1,
            self.classes
        ));
        push_matrix_section(&mut out, "train_x", &self.train_x);
        push_vector_section(
            &mut out,
            "train_y",
            &Array1::from_iter(self.train_y.iter().map(|&v| T::cst(v as f64))),
        );
        push_matrix_section(&mut out, "val_x", &self.val_x);
        push_vector_section(
            &mut out,
            "val_y",
            &Array1::from_iter(self.val_y.iter().map(|&v| T::cst(v as f64))),
        );
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())
    }
}

/// Generate features i.i.d. standard normal and labels sampled from a
/// ground-truth affine softmax model.
pub fn generate_ho_dataset<T: Scalar>(
    seed: u64,
    n_train: usize,
    n_val: usize,
    features: usize,
    classes: usize,
) -> Result<HoDataset<T>> {
    if classes < 2 {
        return Err(BilevelError::InvalidConfig(
            "need at least two classes".into(),
        ));
    }
    if n_train < 1 || n_val < 1 || features < 1 {
        return Err(BilevelError::InvalidConfig(
            "dataset dimensions must be at least 1".into(),
        ));
    }
    let mut rng = seeding::stream(seed, &[seeding::TAG_DATA]);
    let aug = features + 1;
    let truth_scale = T::cst(TRUTH_SCALE / (features as f64).sqrt());
    let mut truth: Array2<T> = Array2::zeros((classes, aug));
    for i in 0..classes {
        for j in 0..aug {
            truth[[i, j]] = T::standard_normal(&mut rng) * truth_scale;
        }
    }
    let gen_split = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut x: Array2<T> = Array2::zeros((n, aug));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..features {
                x[[i, j]] = T::standard_normal(rng);
            }
            x[[i, features]] = T::one();
            let logits = truth.dot(&x.row(i).to_owned());
            let probs = softmax(&logits);
            let u = rng.random::<f64>();
            let mut acc = 0.0;
            let mut label = classes - 1;
            for (c, &p) in probs.iter().enumerate() {
                acc += p.to_f64().expect("finite probability");
                if u < acc {
                    label = c;
                    break;
                }
            }
            y.push(label);
        }
        (x, y)
    };
    let (train_x, train_y) = gen_split(n_train, &mut rng);
    let (val_x, val_y) = gen_split(n_val, &mut rng);
    Ok(HoDataset {
        train_x,
        train_y,
        val_x,
        val_y,
        classes,
        seed,
    })
}

fn softmax<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// The hyperparameter-optimization problem over one [`HoDataset`].
pub struct HoProblem<T> {
    data: HoDataset<T>,
    all_inner: Vec<usize>,
    all_outer: Vec<usize>,
}

impl<T: Scalar> HoProblem<T> {
    pub fn new(data: HoDataset<T>) -> Self {
        let all_inner = (0..data.train_x.nrows()).collect();
        let all_outer = (0..data.val_x.nrows()).collect();
        HoProblem {
            data,
            all_inner,
            all_outer,
        }
    }

    pub fn dataset(&self) -> &HoDataset<T> {
        &self.data
    }

    fn dim(&self) -> usize {
        self.data.classes * self.data.train_x.ncols()
    }

    fn weights(&self, w: &Array1<T>) -> Array2<T> {
        Array2::from_shape_vec(
            (self.data.classes, self.data.train_x.ncols()),
            w.to_vec(),
        )
        .expect("weight reshape")
    }

    fn cross_entropy(&self, w: &Array1<T>, rows: &Array2<T>, labels: &[usize]) -> T {
        let wm = self.weights(w);
        let mut acc = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let logits = wm.dot(&rows.row(i).to_owned());
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
            acc += lse - logits[label];
        }
        acc / T::cst(labels.len() as f64)
    }

    fn cross_entropy_grad(&self, w: &Array1<T>, rows: &Array2<T>, labels: &[usize]) -> Array1<T> {
        let wm = self.weights(w);
        let mut grad: Array2<T> = Array2::zeros(wm.raw_dim());
        for (i, &label) in labels.iter().enumerate() {
            let z = rows.row(i).to_owned();
            let mut probs = softmax(&wm.dot(&z));
            probs[label] -= T::one();
            for c in 0..self.data.classes {
                for j in 0..rows.ncols() {
                    grad[[c, j]] += probs[c] * z[j];
                }
            }
        }
        Array1::from_iter(grad.iter().copied()) / T::cst(labels.len() as f64)
    }

    fn gather(
        rows: &Array2<T>,
        labels: &[usize],
        batch: Batch<'_>,
        all: &[usize],
    ) -> (Array2<T>, Vec<usize>) {
        let idx = super::batch_indices(batch, all);
        let x = rows.select(Axis(0), idx);
        let y = idx.iter().map(|&i| labels[i]).collect();
        (x, y)
    }
}

impl<T: Scalar> BilevelProblem<T> for HoProblem<T> {
    fn outer_dim(&self) -> usize {
        self.dim()
    }

    fn inner_dim(&self) -> usize {
        self.dim()
    }

    fn inner_sample_count(&self) -> usize {
        self.data.train_x.nrows()
    }

    fn outer_sample_count(&self) -> usize {
        self.data.val_x.nrows()
    }

    fn inner_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T {
        let (rows, labels) = Self::gather(&self.data.train_x, &self.data.train_y, batch, &self.all_inner);
        let reg = y
            .iter()
            .zip(x.iter())
            .map(|(&w, &l)| l.exp() * w * w)
            .sum::<T>()
            * T::cst(0.5);
        self.cross_entropy(y, &rows, &labels) + reg
    }

    fn inner_grad_y(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        let (rows, labels) = Self::gather(&self.data.train_x, &self.data.train_y, batch, &self.all_inner);
        let mut grad = self.cross_entropy_grad(y, &rows, &labels);
        for ((g, &w), &l) in grad.iter_mut().zip(y.iter()).zip(x.iter()) {
            *g += l.exp() * w;
        }
        grad
    }

    fn outer_value(&self, _x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T {
        let (rows, labels) = Self::gather(&self.data.val_x, &self.data.val_y, batch, &self.all_outer);
        self.cross_entropy(y, &rows, &labels)
    }

    fn outer_grad_x(&self, x: &Array1<T>, _y: &Array1<T>, _batch: Batch<'_>) -> Array1<T> {
        Array1::zeros(x.len())
    }

    fn outer_grad_y(&self, _x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        let (rows, labels) = Self::gather(&self.data.val_x, &self.data.val_y, batch, &self.all_outer);
        self.cross_entropy_grad(y, &rows, &labels)
    }

    fn has_second_order(&self) -> bool {
        true
    }

    fn hess_vec(&self, x: &Array1<T>, y: &Array1<T>, v: &Array1<T>) -> Option<Array1<T>> {
        let rows = &self.data.train_x;
        let wm = self.weights(y);
        let vm = self.weights(v);
        let mut out: Array2<T> = Array2::zeros(wm.raw_dim());
        for (i, _) in self.data.train_y.iter().enumerate() {
            let z = rows.row(i).to_owned();
            let probs = softmax(&wm.dot(&z));
            let a = vm.dot(&z);
            let pa = probs.dot(&a);
            // (diag(p) − p pᵀ) a, then rank-one with zᵀ.
            let b = &(&probs * &a) - &(&probs * pa);
            for c in 0..self.data.classes {
                for j in 0..rows.ncols() {
                    out[[c, j]] += b[c] * z[j];
                }
            }
        }
        let n = T::cst(self.data.train_y.len() as f64);
        let mut flat = Array1::from_iter(out.iter().copied()) / n;
        for ((o, &vv), &l) in flat.iter_mut().zip(v.iter()).zip(x.iter()) {
            *o += l.exp() * vv;
        }
        Some(flat)
    }

    fn cross_vec(&self, x: &Array1<T>, y: &Array1<T>, v: &Array1<T>) -> Option<Array1<T>> {
        // ∂_λ ∂_w g is diagonal: exp(λ_j) w_j.
        Some(Array1::from_iter(
            x.iter()
                .zip(y.iter())
                .zip(v.iter())
                .map(|((&l, &w), &vv)| l.exp() * w * vv),
        ))
    }
}
