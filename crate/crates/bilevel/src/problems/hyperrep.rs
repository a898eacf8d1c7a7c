//! Shallow hyper-representation: learn an embedding whose ridge regression
//! fits held-out data.
//!
//! Outer variable `x` holds the embedding parameters, inner variable `y` the
//! regression weights:
//!
//! * inner: `g(x, w) = 1/(2 n₂) ‖T(X₂; x) w − Y₂‖² + γ/2 ‖w‖²`
//! * outer: `f(x, w) = 1/(2 n₁) ‖T(X₁; x) w − Y₁‖²`
//!
//! The embedding `T` is either a linear map or a two-layer tanh network, both
//! differentiated by hand. Minibatches index data rows, so the problem also
//! serves the stochastic estimators.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::{Batch, BilevelProblem};
use crate::error::{BilevelError, Result};
use crate::linalg::column_sums;
use crate::scalar::Scalar;
use crate::seeding;

/// Scale of the ground-truth linear embedding entries (relative to
/// `1/sqrt(features)`); chosen so small inner step sizes make visible
/// progress on standard-normal inputs.
pub const LINEAR_SIGNAL_SCALE: f64 = 10.0;
/// Output-layer scale of the ground-truth two-layer embedding.
pub const TWO_LAYER_OUTPUT_SCALE: f64 = 3.0;

/// Embedding architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// `T(X) = X Λ` with `Λ ∈ R^{features×out}` flattened row-major.
    Linear,
    /// `T(X) = tanh(X W₁ + b₁) W₂ + b₂` with the given hidden width.
    TwoLayer { hidden: usize },
}

impl EmbeddingKind {
    /// Length of the flattened parameter vector.
    pub fn param_len(&self, features: usize, out_dim: usize) -> usize {
        match *self {
            EmbeddingKind::Linear => features * out_dim,
            EmbeddingKind::TwoLayer { hidden } => {
                features * hidden + hidden + hidden * out_dim + out_dim
            }
        }
    }

    fn forward<T: Scalar>(
        &self,
        params: &Array1<T>,
        xrows: &ArrayView2<'_, T>,
        out_dim: usize,
    ) -> Array2<T> {
        let features = xrows.ncols();
        match *self {
            EmbeddingKind::Linear => {
                let lam = ArrayView2::from_shape((features, out_dim), params.as_slice().unwrap())
                    .expect("linear embedding shape");
                xrows.dot(&lam)
            }
            EmbeddingKind::TwoLayer { hidden } => {
                let (w1, b1, w2, b2) = unpack_two_layer(params, features, hidden, out_dim);
                let mut pre = xrows.dot(&w1);
                for mut row in pre.rows_mut() {
                    row += &b1;
                }
                let h = pre.mapv(|v| v.tanh());
                let mut out = h.dot(&w2);
                for mut row in out.rows_mut() {
                    row += &b2;
                }
                out
            }
        }
    }

    /// Gradient of `⟨upstream, T(X; params)⟩` with respect to the parameters.
    fn vjp<T: Scalar>(
        &self,
        params: &Array1<T>,
        xrows: &ArrayView2<'_, T>,
        upstream: &Array2<T>,
        out_dim: usize,
    ) -> Array1<T> {
        let features = xrows.ncols();
        match *self {
            EmbeddingKind::Linear => {
                let grad = xrows.t().dot(upstream);
                Array1::from_iter(grad.iter().copied())
            }
            EmbeddingKind::TwoLayer { hidden } => {
                let (w1, b1, w2, _b2) = unpack_two_layer(params, features, hidden, out_dim);
                let mut pre = xrows.dot(&w1);
                for mut row in pre.rows_mut() {
                    row += &b1;
                }
                let h = pre.mapv(|v| v.tanh());
                let g_w2 = h.t().dot(upstream);
                let g_b2 = column_sums(upstream);
                let g_h = upstream.dot(&w2.t());
                let g_pre = &g_h * &h.mapv(|v| T::one() - v * v);
                let g_w1 = xrows.t().dot(&g_pre);
                let g_b1 = column_sums(&g_pre);
                pack_two_layer(&g_w1, &g_b1, &g_w2, &g_b2)
            }
        }
    }
}

fn unpack_two_layer<T: Scalar>(
    params: &Array1<T>,
    features: usize,
    hidden: usize,
    out_dim: usize,
) -> (Array2<T>, Array1<T>, Array2<T>, Array1<T>) {
    let s = params.as_slice().unwrap();
    let mut off = 0;
    let w1 = Array2::from_shape_vec((features, hidden), s[off..off + features * hidden].to_vec())
        .unwrap();
    off += features * hidden;
    let b1 = Array1::from_vec(s[off..off + hidden].to_vec());
    off += hidden;
    let w2 =
        Array2::from_shape_vec((hidden, out_dim), s[off..off + hidden * out_dim].to_vec()).unwrap();
    off += hidden * out_dim;
    let b2 = Array1::from_vec(s[off..off + out_dim].to_vec());
    (w1, b1, w2, b2)
}

fn pack_two_layer<T: Scalar>(
    w1: &Array2<T>,
    b1: &Array1<T>,
    w2: &Array2<T>,
    b2: &Array1<T>,
) -> Array1<T> {
    let mut out = Vec::with_capacity(w1.len() + b1.len() + w2.len() + b2.len());
    out.extend(w1.iter().copied());
    out.extend(b1.iter().copied());
    out.extend(w2.iter().copied());
    out.extend(b2.iter().copied());
    Array1::from_vec(out)
}

/// Synthetic hyper-representation dataset.
#[derive(Debug, Clone)]
pub struct HrDataset<T> {
    /// Validation inputs, `n1 × features`.
    pub x1: Array2<T>,
    /// Validation responses.
    pub y1: Array1<T>,
    /// Training inputs, `n2 × features`.
    pub x2: Array2<T>,
    /// Training responses.
    pub y2: Array1<T>,
    /// Inner ridge coefficient (> 0).
    pub gamma: T,
    pub kind: EmbeddingKind,
    pub out_dim: usize,
    pub seed: u64,
    pub noise_sd: T,
    /// Embedding parameters of the generating model.
    pub truth_params: Array1<T>,
    /// Regression weights of the generating model.
    pub truth_weights: Array1<T>,
}

impl<T: Scalar> HrDataset<T> {
    /// Dump the dataset as a documented CSV: a comment header with the
    /// generation parameters, then one `matrix,<name>,<rows>,<cols>` section
    /// per array with row-major values.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let kind = match self.kind {
            EmbeddingKind::Linear => "linear".to_string(),
            EmbeddingKind::TwoLayer { hidden } => format!("two-layer:{hidden}"),
        };
        out.push_str(&format!(
            "# hr-dataset,seed={},n1={},n2={},features={},out_dim={},noise_sd={:e},gamma={:e},kind={}\n",
            self.seed,
            self.x1.nrows(),
            self.x2.nrows(),
            self.x1.ncols(),
            self.out_dim,
            self.noise_sd,
            self.gamma,
            kind
        ));
        push_matrix_section(&mut out, "x1", &self.x1);
        push_vector_section(&mut out, "y1", &self.y1);
        push_matrix_section(&mut out, "x2", &self.x2);
        push_vector_section(&mut out, "y2", &self.y2);
        push_vector_section(&mut out, "truth_params", &self.truth_params);
        push_vector_section(&mut out, "truth_weights", &self.truth_weights);
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())
    }
}

pub(crate) fn push_matrix_section<T: fmt::LowerExp>(out: &mut String, name: &str, m: &Array2<T>) {
    out.push_str(&format!("matrix,{},{},{}\n", name, m.nrows(), m.ncols()));
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
}

pub(crate) fn push_vector_section<T: fmt::LowerExp>(out: &mut String, name: &str, v: &Array1<T>) {
    out.push_str(&format!("matrix,{},{},1\n", name, v.len()));
    for e in v.iter() {
        out.push_str(&format!("{e:.16e}\n"));
    }
}

/// Generate the synthetic dataset: standard-normal inputs, responses from a
/// seeded ground-truth embedding model plus Gaussian noise.
#[allow(clippy::too_many_arguments)]
pub fn generate_hr_dataset<T: Scalar>(
    seed: u64,
    n1: usize,
    n2: usize,
    features: usize,
    out_dim: usize,
    noise_sd: f64,
    kind: EmbeddingKind,
    gamma: f64,
) -> Result<HrDataset<T>> {
    if n1 < 1 || n2 < 1 || features < 1 || out_dim < 1 {
        return Err(BilevelError::InvalidConfig(
            "dataset dimensions must be at least 1".into(),
        ));
    }
    if noise_sd < 0.0 {
        return Err(BilevelError::InvalidConfig(
            "noise standard deviation must be non-negative".into(),
        ));
    }
    if gamma <= 0.0 {
        return Err(BilevelError::InvalidConfig(
            "ridge coefficient must be positive".into(),
        ));
    }
    if let EmbeddingKind::TwoLayer { hidden } = kind {
        if hidden < 1 {
            return Err(BilevelError::InvalidConfig(
                "hidden width must be at least 1".into(),
            ));
        }
    }
    let mut rng = seeding::stream(seed, &[seeding::TAG_DATA]);
    let gauss_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        let mut m: Array2<T> = Array2::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                m[[i, j]] = T::standard_normal(rng);
            }
        }
        m
    };
    let x1 = gauss_mat(&mut rng, n1, features);
    let x2 = gauss_mat(&mut rng, n2, features);
    let truth_params = sample_embedding_params(&mut rng, kind, features, out_dim);
    let truth_weights: Array1<T> = seeding::gaussian_vector(&mut rng, out_dim);
    let noise = T::cst(noise_sd);
    let respond = |x: &Array2<T>, rng: &mut ChaCha8Rng| {
        let t = kind.forward(&truth_params, &x.view(), out_dim);
        let clean = t.dot(&truth_weights);
        let eps: Array1<T> = seeding::gaussian_vector(rng, x.nrows());
        clean + eps * noise
    };
    let y1 = respond(&x1, &mut rng);
    let y2 = respond(&x2, &mut rng);
    Ok(HrDataset {
        x1,
        y1,
        x2,
        y2,
        gamma: T::cst(gamma),
        kind,
        out_dim,
        seed,
        noise_sd: noise,
        truth_params,
        truth_weights,
    })
}

/// Sample embedding parameters with the same scaling the generator uses for
/// the ground truth (also good for initializing the outer variable).
pub fn sample_embedding_params<T: Scalar>(
    rng: &mut ChaCha8Rng,
    kind: EmbeddingKind,
    features: usize,
    out_dim: usize,
) -> Array1<T> {
    match kind {
        EmbeddingKind::Linear => {
            let scale = T::cst(LINEAR_SIGNAL_SCALE / (features as f64).sqrt());
            seeding::gaussian_vector::<T>(rng, features * out_dim) * scale
        }
        EmbeddingKind::TwoLayer { hidden } => {
            let s1 = T::cst(1.0 / (features as f64).sqrt());
            let s2 = T::cst(TWO_LAYER_OUTPUT_SCALE / (hidden as f64).sqrt());
            let sb = T::cst(0.1);
            let w1 = seeding::gaussian_vector::<T>(rng, features * hidden) * s1;
            let b1 = seeding::gaussian_vector::<T>(rng, hidden) * sb;
            let w2 = seeding::gaussian_vector::<T>(rng, hidden * out_dim) * s2;
            let b2 = seeding::gaussian_vector::<T>(rng, out_dim) * sb;
            let mut out = Vec::with_capacity(w1.len() + b1.len() + w2.len() + b2.len());
            out.extend(w1.iter().copied());
            out.extend(b1.iter().copied());
            out.extend(w2.iter().copied());
            out.extend(b2.iter().copied());
            Array1::from_vec(out)
        }
    }
}

/// Hyper-representation problem over one [`HrDataset`].
pub struct HrProblem<T> {
    data: HrDataset<T>,
}

impl<T: Scalar> HrProblem<T> {
    pub fn new(data: HrDataset<T>) -> Self {
        HrProblem { data }
    }

    pub fn dataset(&self) -> &HrDataset<T> {
        &self.data
    }

    /// Initial outer iterate drawn with the ground-truth scaling.
    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Array1<T> {
        sample_embedding_params(
            rng,
            self.data.kind,
            self.data.x2.ncols(),
            self.data.out_dim,
        )
    }

    fn gathered<'a>(
        source: &'a Array2<T>,
        targets: &'a Array1<T>,
        batch: Batch<'_>,
    ) -> (Array2<T>, Array1<T>, bool) {
        match batch {
            None => (source.clone(), targets.clone(), true),
            Some(idx) => {
                let x = source.select(Axis(0), idx);
                let y = Array1::from_iter(idx.iter().map(|&i| targets[i]));
                (x, y, false)
            }
        }
    }

    fn embed_rows(&self, params: &Array1<T>, rows: &Array2<T>) -> Array2<T> {
        self.data
            .kind
            .forward(params, &rows.view(), self.data.out_dim)
    }
}

impl<T: Scalar> BilevelProblem<T> for HrProblem<T> {
    fn outer_dim(&self) -> usize {
        self.data
            .kind
            .param_len(self.data.x2.ncols(), self.data.out_dim)
    }

    fn inner_dim(&self) -> usize {
        self.data.out_dim
    }

    fn inner_sample_count(&self) -> usize {
        self.data.x2.nrows()
    }

    fn outer_sample_count(&self) -> usize {
        self.data.x1.nrows()
    }

    fn inner_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T {
        let (rows, targets, _) = Self::gathered(&self.data.x2, &self.data.y2, batch);
        let t = self.embed_rows(x, &rows);
        let r = t.dot(y) - &targets;
        let half = T::cst(0.5);
        half * r.dot(&r) / T::cst(rows.nrows() as f64) + half * self.data.gamma * y.dot(y)
    }

    fn inner_grad_y(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        let (rows, targets, _) = Self::gathered(&self.data.x2, &self.data.y2, batch);
        let t = self.embed_rows(x, &rows);
        let r = t.dot(y) - &targets;
        t.t().dot(&r) / T::cst(rows.nrows() as f64) + &(y * self.data.gamma)
    }

    fn outer_value(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> T {
        let (rows, targets, _) = Self::gathered(&self.data.x1, &self.data.y1, batch);
        let t = self.embed_rows(x, &rows);
        let r = t.dot(y) - &targets;
        T::cst(0.5) * r.dot(&r) / T::cst(rows.nrows() as f64)
    }

    fn outer_grad_x(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        let (rows, targets, _) = Self::gathered(&self.data.x1, &self.data.y1, batch);
        let t = self.embed_rows(x, &rows);
        let r = t.dot(y) - &targets;
        // ∂f/∂T = (1/n)(Tw − Y) wᵀ, then pull back through the embedding.
        let upstream = crate::linalg::outer(&r, y) / T::cst(rows.nrows() as f64);
        self.data
            .kind
            .vjp(x, &rows.view(), &upstream, self.data.out_dim)
    }

    fn outer_grad_y(&self, x: &Array1<T>, y: &Array1<T>, batch: Batch<'_>) -> Array1<T> {
        let (rows, targets, _) = Self::gathered(&self.data.x1, &self.data.y1, batch);
        let t = self.embed_rows(x, &rows);
        let r = t.dot(y) - &targets;
        t.t().dot(&r) / T::cst(rows.nrows() as f64)
    }

    fn has_second_order(&self) -> bool {
        true
    }

    fn hess_vec(&self, x: &Array1<T>, _y: &Array1<T>, v: &Array1<T>) -> Option<Array1<T>> {
        let t = self.embed_rows(x, &self.data.x2);
        let tv = t.dot(v);
        Some(t.t().dot(&tv) / T::cst(self.data.x2.nrows() as f64) + &(v * self.data.gamma))
    }

    fn cross_vec(&self, x: &Array1<T>, y: &Array1<T>, v: &Array1<T>) -> Option<Array1<T>> {
        let n2 = T::cst(self.data.x2.nrows() as f64);
        let t = self.embed_rows(x, &self.data.x2);
        let r = t.dot(y) - &self.data.y2;
        let tv = t.dot(v);
        // d/dx ⟨∇_w g, v⟩ with upstream (1/n₂)[(Tv) wᵀ + r vᵀ] on T.
        let upstream = (crate::linalg::outer(&tv, y) + crate::linalg::outer(&r, v)) / n2;
        Some(
            self.data
                .kind
                .vjp(x, &self.data.x2.view(), &upstream, self.data.out_dim),
        )
    }
}
