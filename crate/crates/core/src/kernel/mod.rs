//! Low-rank NDPP kernels `L = X W Xᵀ` with `X = [V | B]` and
//! `W = Diag(I, D − Dᵀ)`.

mod io;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NdppError, Result};
use crate::linalg::{self, EPS_INV};

pub use io::{
    load_kernel, read_binary, read_text, save_kernel, write_binary, write_text, KernelFormat,
};

/// Relative floor for treating a negative principal minor as roundoff.
pub const EPS_DET: f64 = 1e-10;

/// A low-rank nonsymmetric DPP kernel.
///
/// The factors are the source of truth; `X` and `W` are materialized once at
/// construction and the kernel is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankKernel {
    v: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    x: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl LowRankKernel {
    /// Builds the kernel from `V` (n×d1), `B` (n×d2) and `D` (d2×d2).
    pub fn new(v: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = v.nrows();
        let (d1, d2) = (v.ncols(), b.ncols());
        if n == 0 {
            return Err(NdppError::Dimension(
                "kernel needs at least one item".into(),
            ));
        }
        if b.nrows() != n {
            return Err(NdppError::Dimension(format!(
                "V has {n} rows but B has {}",
                b.nrows()
            )));
        }
        if d.nrows() != d2 || d.ncols() != d2 {
            return Err(NdppError::Dimension(format!(
                "D must be {d2}x{d2}, got {}x{}",
                d.nrows(),
                d.ncols()
            )));
        }
        if d1 + d2 < 2 {
            return Err(NdppError::Dimension(format!(
                "rank d = {} must be at least 2",
                d1 + d2
            )));
        }
        for (name, m) in [("V", &v), ("B", &b), ("D", &d)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(NdppError::NonFinite(name));
            }
        }

        let dim = d1 + d2;
        let mut x = DMatrix::zeros(n, dim);
        x.view_mut((0, 0), (n, d1)).copy_from(&v);
        x.view_mut((0, d1), (n, d2)).copy_from(&b);
        let mut w = DMatrix::zeros(dim, dim);
        for i in 0..d1 {
            w[(i, i)] = 1.0;
        }
        w.view_mut((d1, d1), (d2, d2))
            .copy_from(&(&d - d.transpose()));

        Ok(Self { v, b, d, x, w })
    }

    /// Kernel with no skew part (`d2 = 0`), i.e. the symmetric DPP `L = V Vᵀ`.
    pub fn symmetric(v: DMatrix<f64>) -> Result<Self> {
        let n = v.nrows();
        Self::new(v, DMatrix::zeros(n, 0), DMatrix::zeros(0, 0))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Inner dimension `d = d1 + d2`; an upper bound on rank(L).
    pub fn rank(&self) -> usize {
        self.x.ncols()
    }

    pub fn d1(&self) -> usize {
        self.v.ncols()
    }

    pub fn d2(&self) -> usize {
        self.b.ncols()
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `XᵀX`, the d×d Gram matrix used by the tree sampler.
    pub fn gram(&self) -> DMatrix<f64> {
        self.x.tr_mul(&self.x)
    }

    /// The full n×n kernel. Only sensible for small `n`.
    pub fn dense(&self) -> DMatrix<f64> {
        &self.x * &self.w * self.x.transpose()
    }

    /// `L_ii = x_i W x_iᵀ`.
    pub fn diagonal(&self, i: usize) -> f64 {
        linalg::quad_form(&self.w, &linalg::row_vec(&self.x, i))
    }

    /// Rows of `X` indexed by `subset`, in the given order.
    pub fn rows(&self, subset: &[usize]) -> DMatrix<f64> {
        self.x.select_rows(subset)
    }

    /// Returns a copy with `X` scaled by `c` (`V` and `B` scaled, `D` kept).
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.v * c, &self.b * c, self.d.clone())
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.n()) {
            return Err(NdppError::InvalidArgument(format!(
                "index {bad} out of range for n = {}",
                self.n()
            )));
        }
        Ok(())
    }

    /// `det([X W Xᵀ]_S)`, clamped at zero within the roundoff floor.
    pub fn det_subset(&self, subset: &[usize]) -> Result<f64> {
        self.det_subset_with(&self.w, subset)
    }

    /// The minor together with the roundoff floor used to clamp it. Values at
    /// or below the floor are numerically indistinguishable from zero.
    pub fn det_and_tolerance(&self, subset: &[usize]) -> Result<(f64, f64)> {
        self.check_subset(subset)?;
        if subset.is_empty() {
            return Ok((1.0, EPS_DET));
        }
        if subset.len() > self.rank() {
            return Ok((0.0, EPS_DET));
        }
        let xs = self.rows(subset);
        let g = &xs * &self.w * xs.transpose();
        Ok((clamp_det(subset, linalg::det(&g), &g)?, det_tolerance(&g)))
    }

    /// `det([X M Xᵀ]_S)` for an arbitrary inner matrix `M` (e.g. a conditional
    /// or proposal matrix), with the same clamping rule as [`Self::det_subset`].
    pub fn det_subset_with(&self, inner: &DMatrix<f64>, subset: &[usize]) -> Result<f64> {
        self.check_subset(subset)?;
        if subset.is_empty() {
            return Ok(1.0);
        }
        if subset.len() > self.rank() {
            return Ok(0.0);
        }
        let xs = self.rows(subset);
        let g = &xs * inner * xs.transpose();
        clamp_det(subset, linalg::det(&g), &g)
    }

    /// Conditions the inner matrix `w_in` on the items `a_set`:
    /// `W^A = W − W X_Aᵀ (X_A W X_Aᵀ)⁻¹ X_A W`.
    ///
    /// `w_in` is `W` itself or a previously conditioned inner matrix.
    pub fn condition_inner(
        &self,
        w_in: &DMatrix<f64>,
        a_set: &[usize],
    ) -> Result<ConditionalInner> {
        self.check_subset(a_set)?;
        let d = self.rank();
        if w_in.nrows() != d || w_in.ncols() != d {
            return Err(NdppError::Dimension(format!(
                "inner matrix must be {d}x{d}"
            )));
        }
        if a_set.len() + 2 > d {
            return Err(NdppError::InvalidArgument(format!(
                "conditioning set of size {} exceeds d - 2 = {}",
                a_set.len(),
                d.saturating_sub(2)
            )));
        }
        if a_set.is_empty() {
            return Ok(ConditionalInner {
                a_set: Vec::new(),
                wa: w_in.clone(),
            });
        }

        let xa = self.rows(a_set);
        let left = w_in * xa.transpose(); // d×|A|
        let right = &xa * w_in; // |A|×d
        let m = &right * xa.transpose(); // |A|×|A|

        if m.iter().any(|v| !v.is_finite()) {
            return Err(NdppError::NonFinite("conditioning matrix"));
        }
        // Scale by ‖X_A‖²‖W‖ as well as σ_max(M): a 1×1 M is always
        // perfectly conditioned relative to itself.
        let sv = m.singular_values();
        let scale = sv.max().max(xa.norm_squared() * w_in.norm());
        let rcond = if scale > 0.0 { sv.min() / scale } else { 0.0 };
        if !(rcond > EPS_INV) {
            return Err(NdppError::SingularConditioning {
                subset: a_set.to_vec(),
                rcond,
            });
        }
        let solved = m
            .lu()
            .solve(&right)
            .ok_or_else(|| NdppError::SingularConditioning {
                subset: a_set.to_vec(),
                rcond,
            })?;
        let mut wa = w_in - left * solved;
        if linalg::is_exactly_symmetric(w_in) {
            wa = linalg::symmetric_part(&wa);
        }
        Ok(ConditionalInner {
            a_set: a_set.to_vec(),
            wa,
        })
    }
}

/// Applies the roundoff floor `ε_det · (1 + hadamard(G))` to a computed minor.
fn clamp_det(subset: &[usize], value: f64, g: &DMatrix<f64>) -> Result<f64> {
    let tol = det_tolerance(g);
    if value >= 0.0 {
        Ok(value)
    } else if value >= -tol {
        Ok(0.0)
    } else {
        Err(NdppError::NegativeDeterminant {
            subset: subset.to_vec(),
            value,
            tol,
        })
    }
}

pub(crate) fn det_tolerance(g: &DMatrix<f64>) -> f64 {
    EPS_DET * (1.0 + linalg::hadamard_bound(g))
}

/// The inner matrix of the NDPP conditioned on `a_set`: `L^A = X W^A Xᵀ`.
#[derive(Debug, Clone)]
pub struct ConditionalInner {
    pub a_set: Vec<usize>,
    pub wa: DMatrix<f64>,
}

/// Builds a kernel from its factors. See [`LowRankKernel::new`].
pub fn build_kernel(v: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<LowRankKernel> {
    LowRankKernel::new(v, b, d)
}

/// Random kernel with `V, B` entries i.i.d. `N(0, 2/d)` (standard deviation
/// `√(2/d)`) and `D` entries i.i.d. `N(0, 1)`; `d1 = d2 = d/2`.
pub fn synth_kernel(n: usize, d: usize, seed: u64) -> Result<LowRankKernel> {
    if d < 2 || d % 2 != 0 {
        return Err(NdppError::InvalidArgument(format!(
            "d must be even and >= 2, got {d}"
        )));
    }
    if d > n {
        return Err(NdppError::InvalidArgument(format!(
            "d = {d} exceeds n = {n}"
        )));
    }
    let half = d / 2;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let factor = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("finite std");
    let inner = Normal::new(0.0, 1.0).expect("finite std");
    let mut draw = |rows: usize, cols: usize, dist: &Normal<f64>| {
        let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        DMatrix::from_row_slice(rows, cols, &data)
    };
    let v = draw(n, half, &factor);
    let b = draw(n, half, &factor);
    let dm = draw(half, half, &inner);
    LowRankKernel::new(v, b, dm)
}
