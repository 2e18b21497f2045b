//! Small dense helpers shared by the kernel, spectral and sampler modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue tolerance used for PSD and spectrum checks.
pub const EPS_EIG: f64 = 1e-8;
/// Relative tolerance for linear identities (orthonormality, zero rows, sums).
pub const EPS_LIN: f64 = 1e-9;
/// Reciprocal condition number below which a conditioning matrix is singular.
pub const EPS_INV: f64 = 1e-12;

pub(crate) fn det(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => m.clone().lu().determinant(),
    }
}

/// Product of row norms; bounds `|det(m)|` from above.
pub(crate) fn hadamard_bound(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).product()
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `⟨a, b⟩ = Σ a_ij b_ij`.
pub(crate) fn frobenius_inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x M xᵀ` for a row vector `x`.
pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = x.len();
    let mut total = 0.0;
    for j in 0..d {
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..d {
            s += x[i] * col[i];
        }
        total += s * x[j];
    }
    total
}

/// `x M yᵀ` for row vectors `x`, `y`.
pub(crate) fn bilinear(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut total = 0.0;
    for j in 0..d {
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..d {
            s += x[i] * col[i];
        }
        total += s * y[j];
    }
    total
}

pub(crate) fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn skew_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

pub(crate) fn is_exactly_symmetric(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| m[(i, j)] == m[(j, i)]))
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub(crate) fn sorted_sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        // NaN eigenvalues make every downstream comparison fail
        return (DVector::from_element(n, f64::NAN), DMatrix::identity(n, n));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Draws an index with probability proportional to `weights` (negative
/// entries count as zero). `None` when the total mass is not positive.
pub(crate) fn draw_categorical<R: rand::Rng + ?Sized>(
    weights: &[f64],
    rng: &mut R,
) -> Option<usize> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        let w = w.max(0.0);
        if w <= 0.0 {
            continue;
        }
        if target < w {
            return Some(i);
        }
        target -= w;
        last = Some(i);
    }
    last
}

pub(crate) fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}
