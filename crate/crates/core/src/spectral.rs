//! Eigenstructure utilities: Youla decomposition of skew-symmetric matrices,
//! spectral symmetrization of conditional inner matrices, kernel spectra,
//! elementary symmetric polynomials and the categorical draws built on them.

use nalgebra::{DMatrix, DVector, Hessenberg, Schur, SVD};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{NdppError, Result};
use crate::kernel::LowRankKernel;
use crate::linalg::{self, EPS_EIG, EPS_LIN};

/// Relative cutoff (against `σ_max`) below which Youla pairs are dropped.
pub const EPS_SIG: f64 = 1e-12;
/// Iteration cap for the Schur and SVD solvers.
const MAX_SWEEPS: usize = 10_000;

/// `skew = Σ_i σ_i (y_i z_iᵀ − z_i y_iᵀ)` with `[Y Z]` orthonormal.
#[derive(Debug, Clone)]
pub struct YoulaFactors {
    /// Nonnegative, sorted descending.
    pub sigmas: Vec<f64>,
    /// d×m, column i is `y_i`.
    pub y: DMatrix<f64>,
    /// d×m, column i is `z_i`.
    pub z: DMatrix<f64>,
}

impl YoulaFactors {
    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// `Σ σ_i (y_i z_iᵀ − z_i y_iᵀ)`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for (i, &s) in self.sigmas.iter().enumerate() {
            let y = self.y.column(i);
            let z = self.z.column(i);
            out += (y * z.transpose() - z * y.transpose()) * s;
        }
        out
    }

    /// `Σ σ_i (y_i y_iᵀ + z_i z_iᵀ)`, the PSD matrix with the same spectrum
    /// magnitudes as the skew input.
    pub fn symmetric_lift(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for (i, &s) in self.sigmas.iter().enumerate() {
            let y = self.y.column(i);
            let z = self.z.column(i);
            out += (y * y.transpose() + z * z.transpose()) * s;
        }
        out
    }
}

fn check_skew(skew: &DMatrix<f64>) -> Result<()> {
    if !skew.is_square() {
        return Err(NdppError::Dimension("skew matrix must be square".into()));
    }
    if skew.iter().any(|v| !v.is_finite()) {
        return Err(NdppError::NonFinite("skew matrix"));
    }
    let asym = linalg::max_abs(&(skew + skew.transpose()));
    if asym > EPS_LIN * linalg::max_abs(skew).max(1.0) {
        return Err(NdppError::NotSkew(asym));
    }
    Ok(())
}

/// Youla decomposition (the real Schur form of a skew matrix), computed by
/// tridiagonal reduction and a bidiagonal SVD.
///
/// Pairs with `σ ≤ 1e-12 · σ_max` are dropped. Each 2×2 block is oriented so
/// that its `(y, z)` entry is `+σ`.
pub fn youla_decompose(skew: &DMatrix<f64>) -> Result<YoulaFactors> {
    check_skew(skew)?;
    let raw = raw_youla_pairs(skew);
    let smax = raw.iter().map(|p| p.0).fold(0.0, f64::max);
    Ok(collect_pairs(skew.nrows(), raw, EPS_SIG * smax))
}

/// Like [`youla_decompose`] but with an absolute floor on retained `σ`.
pub fn youla_decompose_with_floor(skew: &DMatrix<f64>, floor: f64) -> Result<YoulaFactors> {
    check_skew(skew)?;
    let raw = raw_youla_pairs(skew);
    let smax = raw.iter().map(|p| p.0).fold(0.0, f64::max);
    Ok(collect_pairs(skew.nrows(), raw, floor.max(EPS_SIG * smax)))
}

type RawPair = (f64, DVector<f64>, DVector<f64>);

fn collect_pairs(d: usize, mut raw: Vec<RawPair>, floor: f64) -> YoulaFactors {
    raw.retain(|p| p.0 > floor && p.0 > 0.0);
    raw.sort_by(|a, b| b.0.total_cmp(&a.0));
    let m = raw.len();
    let mut y = DMatrix::zeros(d, m);
    let mut z = DMatrix::zeros(d, m);
    let mut sigmas = Vec::with_capacity(m);
    for (i, (s, yi, zi)) in raw.into_iter().enumerate() {
        sigmas.push(s);
        y.set_column(i, &yi);
        z.set_column(i, &zi);
    }
    YoulaFactors { sigmas, y, z }
}

fn raw_youla_pairs(skew: &DMatrix<f64>) -> Vec<RawPair> {
    let d = skew.nrows();
    if d < 2 || linalg::max_abs(skew) == 0.0 {
        return Vec::new();
    }
    // Both iterative routes can return a wrong factorization without
    // reporting failure, so each result is checked before use.
    if let Some(pairs) = tridiagonal_pairs(skew).filter(|p| reconstructs(skew, p)) {
        return pairs;
    }
    if let Some(schur) = Schur::try_new(skew.clone(), 5.0 * f64::EPSILON, MAX_SWEEPS) {
        let (q, t) = schur.unpack();
        let pairs = schur_pairs(&q, &t);
        if reconstructs(skew, &pairs) {
            return pairs;
        }
    }
    gram_pairs(skew)
}

fn reconstructs(skew: &DMatrix<f64>, pairs: &[RawPair]) -> bool {
    let mut recon = DMatrix::zeros(skew.nrows(), skew.ncols());
    for (s, y, z) in pairs {
        recon += (y * z.transpose() - z * y.transpose()) * *s;
    }
    let err = linalg::max_abs(&(recon - skew));
    err <= 1e-10 * linalg::max_abs(skew)
}

/// Orthogonal reduction `S = Q H Qᵀ` makes `H` skew-tridiagonal. Every
/// nonzero entry of `H` couples an even and an odd index, so with
/// `B = H[even, odd]` (bidiagonal) the SVD `B = Σ σ_j p_j r_jᵀ` gives
/// `S = Σ σ_j (y_j z_jᵀ − z_j y_jᵀ)` with `y_j = Q p̂_j`, `z_j = Q r̂_j`
/// (hats embed into the even/odd coordinates).
fn tridiagonal_pairs(skew: &DMatrix<f64>) -> Option<Vec<RawPair>> {
    let d = skew.nrows();
    let (q, h) = Hessenberg::new(skew.clone()).unpack();
    let (ne, no) = ((d + 1) / 2, d / 2);
    // average the two mirrored entries to stay exactly skew
    let band: Vec<f64> = (0..d - 1)
        .map(|i| 0.5 * (h[(i, i + 1)] - h[(i + 1, i)]))
        .collect();
    let top = band.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut b = DMatrix::zeros(ne, no);
    for (i, &v) in band.iter().enumerate() {
        // explicit deflation; the SVD mishandles tiny nonzero couplings
        let v = if v.abs() <= d as f64 * f64::EPSILON * top {
            0.0
        } else {
            v
        };
        if i % 2 == 0 {
            b[(i / 2, i / 2)] = v;
        } else {
            b[(i / 2 + 1, i / 2)] = -v;
        }
    }
    let svd = SVD::try_new(b, true, true, 5.0 * f64::EPSILON, MAX_SWEEPS)?;
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut pairs = Vec::with_capacity(no);
    for j in 0..svd.singular_values.len() {
        let mut y = DVector::zeros(d);
        let mut z = DVector::zeros(d);
        for (r, i) in (0..d).step_by(2).enumerate() {
            y.axpy(u[(r, j)], &q.column(i), 1.0);
        }
        for (c, i) in (1..d).step_by(2).enumerate() {
            z.axpy(vt[(j, c)], &q.column(i), 1.0);
        }
        pairs.push((svd.singular_values[j], y, z));
    }
    Some(pairs)
}

/// Reads `(σ, y, z)` triples off the 2×2 diagonal blocks of a real Schur form.
fn schur_pairs(q: &DMatrix<f64>, t: &DMatrix<f64>) -> Vec<RawPair> {
    let d = t.nrows();
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < d {
        if i + 1 < d && t[(i + 1, i)] != 0.0 {
            let upper = t[(i, i + 1)];
            let sigma = 0.5 * (upper - t[(i + 1, i)]);
            let (a, b) = (q.column(i).into_owned(), q.column(i + 1).into_owned());
            if sigma >= 0.0 {
                pairs.push((sigma, a, b));
            } else {
                pairs.push((-sigma, b, a));
            }
            i += 2;
        } else {
            i += 1;
        }
    }
    pairs
}

/// Fallback route through the PSD matrix `SᵀS`, whose eigenvalues are the
/// `σ_i²` (each twice). Used only if the Schur iteration fails to converge.
fn gram_pairs(skew: &DMatrix<f64>) -> Vec<RawPair> {
    let d = skew.nrows();
    let (vals, vecs) = linalg::sorted_sym_eigen(&skew.tr_mul(skew));
    let top = vals[0].max(0.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut pairs = Vec::new();
    for j in 0..d {
        if vals[j] <= (EPS_SIG * EPS_SIG) * top {
            break;
        }
        let mut y = vecs.column(j).into_owned();
        for b in &basis {
            let proj = b.dot(&y);
            y -= b * proj;
        }
        let norm = y.norm();
        if norm < 0.5 {
            continue;
        }
        y /= norm;
        let sz = -(skew * &y);
        let sigma = sz.norm();
        if sigma <= 1e-10 * top.sqrt() {
            continue;
        }
        let z = sz / sigma;
        basis.push(y.clone());
        basis.push(z.clone());
        pairs.push((sigma, y, z));
    }
    pairs
}

fn check_psd_symmetric(sym: &DMatrix<f64>) -> Result<()> {
    let (vals, _) = linalg::sorted_sym_eigen(sym);
    let n = vals.len();
    if n == 0 {
        return Ok(());
    }
    let scale = vals[0].abs().max(vals[n - 1].abs()).max(1.0);
    if vals[n - 1] < -EPS_EIG * scale {
        return Err(NdppError::NotPsd(vals[n - 1]));
    }
    Ok(())
}

/// `Ŵ^A = (W^A + W^Aᵀ)/2 + Σ σ_i (y_i y_iᵀ + z_i z_iᵀ)` from the Youla
/// factors of `(W^A − W^Aᵀ)/2`.
///
/// Every principal minor of `X Ŵ^A Xᵀ` dominates the corresponding minor of
/// `X W^A Xᵀ`, with equality for subsets of size at least `d`.
pub fn symmetrize_proposal(wa: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !wa.is_square() {
        return Err(NdppError::Dimension("inner matrix must be square".into()));
    }
    check_psd_symmetric(&linalg::symmetric_part(wa))?;
    spectral_symmetrization(wa)
}

/// [`symmetrize_proposal`] without the PSD check on the symmetric part.
pub(crate) fn spectral_symmetrization(wa: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = linalg::symmetric_part(wa);
    let skew = linalg::skew_part(wa);
    if linalg::max_abs(&skew) == 0.0 {
        return Ok(sym);
    }
    let youla = youla_decompose_with_floor(&skew, EPS_SIG * wa.norm())?;
    Ok(sym + youla.symmetric_lift())
}

/// The `d` eigenvalues of `W XᵀX`, i.e. the nonzero eigenvalues of `L`.
///
/// A nonsymmetric kernel has complex-conjugate pairs in general; real parts
/// are nonnegative because `L + Lᵀ` is PSD. Imaginary parts below
/// `ε_eig · ‖W XᵀX‖` are folded to zero and small negative real parts are
/// clamped. Sorted by descending real part.
pub fn nonzero_eigvals(kernel: &LowRankKernel) -> Result<Vec<Complex64>> {
    let m = kernel.w() * kernel.gram();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NdppError::InvalidSpectrum(
            "W XᵀX has non-finite entries".into(),
        ));
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let tol = EPS_EIG * scale;
    let mut out = Vec::with_capacity(m.nrows());
    for mut lam in m.complex_eigenvalues().iter().copied() {
        if !lam.re.is_finite() || !lam.im.is_finite() {
            return Err(NdppError::InvalidSpectrum("non-finite eigenvalue".into()));
        }
        if lam.re < -tol {
            return Err(NdppError::InvalidSpectrum(format!(
                "eigenvalue {lam} has negative real part beyond tolerance {tol:e}"
            )));
        }
        lam.re = lam.re.max(0.0);
        if lam.im.abs() <= tol {
            lam.im = 0.0;
        }
        out.push(lam);
    }
    out.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(out)
}

/// Complex eigenvalues of the kernel together with the real elementary
/// symmetric polynomials `e_0..e_d` of them (the k-NDPP normalizers).
#[derive(Debug, Clone)]
pub struct NdppSpectrum {
    pub eigenvalues: Vec<Complex64>,
    /// `esp[k] = e_k(λ) = Σ_{|S|=k} det(L_S)`.
    pub esp: Vec<f64>,
}

impl NdppSpectrum {
    pub fn from_kernel(kernel: &LowRankKernel) -> Result<Self> {
        let eigenvalues = nonzero_eigvals(kernel)?;
        let esp = real_esp(&eigenvalues, kernel.n())?;
        Ok(Self { eigenvalues, esp })
    }

    /// `Σ_k e_k = det(L + I)`.
    pub fn total(&self) -> f64 {
        self.esp.iter().sum()
    }

    /// Normalized size law `Pr(|S| = k) = e_k / Σ e_j`.
    pub fn size_probabilities(&self) -> Vec<f64> {
        let total = self.total();
        self.esp.iter().map(|e| e / total).collect()
    }
}

/// Elementary symmetric polynomials of a self-conjugate multiset, verified
/// to be real. Entries above `max_size` are zero (no subsets that large).
fn real_esp(lambdas: &[Complex64], max_size: usize) -> Result<Vec<f64>> {
    let d = lambdas.len();
    let mut e = vec![Complex64::new(0.0, 0.0); d + 1];
    let mut mag = vec![0.0; d + 1];
    e[0] = Complex64::new(1.0, 0.0);
    mag[0] = 1.0;
    for (j, &lam) in lambdas.iter().enumerate() {
        for k in (1..=j + 1).rev() {
            e[k] = e[k] + lam * e[k - 1];
            mag[k] += lam.norm() * mag[k - 1];
        }
    }
    let mut out = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let tol = EPS_EIG * mag[k];
        if e[k].im.abs() > tol {
            return Err(NdppError::InvalidSpectrum(format!(
                "e_{k} has imaginary part {:e} (scale {:e})",
                e[k].im, mag[k]
            )));
        }
        if e[k].re < -tol {
            return Err(NdppError::InvalidSpectrum(format!(
                "e_{k} = {:e} is negative",
                e[k].re
            )));
        }
        out.push(if k > max_size { 0.0 } else { e[k].re.max(0.0) });
    }
    Ok(out)
}

/// Triangular table `E[j][k] = e_k(λ_1..λ_j)` for nonnegative reals.
#[derive(Debug, Clone)]
pub struct ElemSymTable {
    lambdas: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl ElemSymTable {
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    /// `e_k` over the first `j` values; zero for `k > j`.
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.rows[j].get(k).copied().unwrap_or(0.0)
    }

    /// `e_k` over all values.
    pub fn e(&self, k: usize) -> f64 {
        self.get(self.dim(), k)
    }

    /// `(e_0, …, e_d)` over all values.
    pub fn top_row(&self) -> &[f64] {
        &self.rows[self.dim()]
    }
}

/// Builds the full table with the recursion
/// `e_k(λ_1..λ_j) = e_k(λ_1..λ_{j−1}) + λ_j e_{k−1}(λ_1..λ_{j−1})`.
///
/// Values in `[−ε_eig · max|λ|, 0)` are clamped to zero.
pub fn elementary_symmetric(lambdas: &[f64]) -> Result<ElemSymTable> {
    let d = lambdas.len();
    let scale = lambdas.iter().fold(1.0_f64, |acc, l| acc.max(l.abs()));
    let mut clamped = Vec::with_capacity(d);
    for &l in lambdas {
        if !l.is_finite() || l < -EPS_EIG * scale {
            return Err(NdppError::InvalidSpectrum(format!(
                "eigenvalue {l} is negative"
            )));
        }
        clamped.push(l.max(0.0));
    }
    let mut rows = Vec::with_capacity(d + 1);
    let mut prev = vec![0.0; d + 1];
    prev[0] = 1.0;
    rows.push(prev.clone());
    for (j, &l) in clamped.iter().enumerate() {
        let mut cur = vec![0.0; d + 1];
        cur[0] = 1.0;
        for k in 1..=j + 1 {
            cur[k] = prev[k] + l * prev[k - 1];
        }
        rows.push(cur.clone());
        prev = cur;
    }
    Ok(ElemSymTable {
        lambdas: clamped,
        rows,
    })
}

/// Draws `E ⊆ [d]`, `|E| = k`, with `Pr(E) = Π_{i∈E} λ_i / e_k(λ)`.
///
/// Backward scan: at position `j` with `r` items still needed, include `j`
/// with probability `λ_j E[j−1][r−1] / E[j][r]`. Returned ascending.
pub fn sample_elementary_subset<R: Rng + ?Sized>(
    table: &ElemSymTable,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let d = table.dim();
    if k > d {
        return Err(NdppError::InvalidArgument(format!(
            "k = {k} exceeds d = {d}"
        )));
    }
    if !(table.e(k) > 0.0) {
        return Err(NdppError::NoSupport(format!("e_{k} = 0")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut remaining = k;
    for j in (1..=d).rev() {
        if remaining == 0 {
            break;
        }
        let denom = table.get(j, remaining);
        let take = if j == remaining {
            true
        } else if denom > 0.0 {
            let p = table.lambdas[j - 1] * table.get(j - 1, remaining - 1) / denom;
            rng.random::<f64>() < p
        } else {
            false
        };
        if take {
            chosen.push(j - 1);
            remaining -= 1;
        }
    }
    chosen.reverse();
    Ok(chosen)
}

/// Draws `k ∈ {0..d}` with probability proportional to `weights[k]`
/// (typically `e_0..e_d`).
pub fn sample_size<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    linalg::draw_categorical(weights, rng)
        .ok_or_else(|| NdppError::NoSupport("all size weights are zero".into()))
}

fn check_symmetric_input(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(NdppError::Dimension("matrix must be square".into()));
    }
    let asym = linalg::max_abs(&(m - m.transpose()));
    if asym > EPS_LIN * linalg::max_abs(m).max(1.0) {
        return Err(NdppError::InvalidArgument(format!(
            "matrix is not symmetric ({asym:e})"
        )));
    }
    Ok(())
}

fn psd_power(m: &DMatrix<f64>, tol: f64, power: f64) -> Result<(DMatrix<f64>, usize)> {
    check_symmetric_input(m)?;
    let d = m.nrows();
    let (vals, vecs) = linalg::sorted_sym_eigen(&linalg::symmetric_part(m));
    if d == 0 || !(vals[0] > 0.0) {
        return Ok((DMatrix::zeros(d, d), 0));
    }
    let top = vals[0];
    if vals[d - 1] < -EPS_EIG * top {
        return Err(NdppError::NotPsd(vals[d - 1]));
    }
    let mut out = DMatrix::zeros(d, d);
    let mut kept = 0;
    for i in 0..d {
        if vals[i] > tol * top {
            let u = vecs.column(i);
            out += (u * u.transpose()) * vals[i].powf(power);
            kept += 1;
        }
    }
    Ok((out, kept))
}

/// `U = Σ_{μ_i > tol·μ_max} μ_i^{−1/2} u_i u_iᵀ`; `U M U` is the orthogonal
/// projection onto the retained eigenspace.
pub fn pseudo_inv_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (u, kept) = psd_power(m, tol, -0.5)?;
    if kept == 0 {
        return Err(NdppError::NoSupport(
            "matrix has no eigenvalue above tolerance".into(),
        ));
    }
    Ok(u)
}

/// PSD square root with eigenvalues below `tol·μ_max` treated as zero.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    psd_power(m, tol, 0.5).map(|(u, _)| u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check_youla(skew: &DMatrix<f64>, f: &YoulaFactors) {
        let recon = f.reconstruct();
        assert!((recon - skew).norm() <= 1e-10 * skew.norm().max(1e-300));
        let mut basis = DMatrix::zeros(skew.nrows(), 2 * f.len());
        for i in 0..f.len() {
            basis.set_column(2 * i, &f.y.column(i));
            basis.set_column(2 * i + 1, &f.z.column(i));
        }
        let gram = basis.tr_mul(&basis);
        assert!((gram - DMatrix::identity(2 * f.len(), 2 * f.len())).amax() <= 1e-9);
        assert!(f.sigmas.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.sigmas.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn youla_of_zero_is_empty() {
        let f = youla_decompose(&DMatrix::zeros(4, 4)).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn youla_canonical_block() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        let f = youla_decompose(&s).unwrap();
        assert_eq!(f.len(), 1);
        assert!((f.sigmas[0] - 2.0).abs() < 1e-14);
        // y ∧ z must equal e1 ∧ e2 with the +σ orientation
        let (y, z) = (f.y.column(0), f.z.column(0));
        let wedge = y[0] * z[1] - y[1] * z[0];
        assert!((wedge - 1.0).abs() < 1e-14);
        check_youla(&s, &f);
    }

    #[test]
    fn youla_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in (2..=12).step_by(2).chain([3, 5, 7]) {
            for _ in 0..15 {
                let m = random_matrix(d, &mut rng);
                let s = (&m - m.transpose()) * 0.5;
                let f = youla_decompose(&s).unwrap();
                assert_eq!(f.len(), d / 2);
                check_youla(&s, &f);
            }
        }
    }

    #[test]
    fn youla_rank_deficient_and_repeated() {
        // two equal blocks and a null direction
        let mut s = DMatrix::zeros(5, 5);
        s[(0, 1)] = 1.5;
        s[(1, 0)] = -1.5;
        s[(2, 3)] = -1.5;
        s[(3, 2)] = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_matrix(5, &mut rng).qr().q();
        let s = &q * s * q.transpose();
        let f = youla_decompose(&s).unwrap();
        assert_eq!(f.len(), 2);
        check_youla(&s, &f);
    }

    #[test]
    fn gram_fallback_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in [2, 4, 6, 7] {
            let m = random_matrix(d, &mut rng);
            let s = (&m - m.transpose()) * 0.5;
            let f = collect_pairs(d, gram_pairs(&s), 0.0);
            check_youla(&s, &f);
        }
    }

    #[test]
    fn schur_route_agrees_with_tridiagonal_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for d in [2, 3, 5, 8, 11] {
            let m = random_matrix(d, &mut rng);
            let s = (&m - m.transpose()) * 0.5;
            let (q, t) = Schur::new(s.clone()).unpack();
            let via_schur = collect_pairs(d, schur_pairs(&q, &t), 0.0);
            let via_svd = collect_pairs(d, tridiagonal_pairs(&s).unwrap(), 0.0);
            check_youla(&s, &via_schur);
            check_youla(&s, &via_svd);
            for (a, b) in via_schur.sigmas.iter().zip(&via_svd.sigmas) {
                assert!((a - b).abs() < 1e-12 * via_svd.sigmas[0]);
            }
            assert!((via_schur.symmetric_lift() - via_svd.symmetric_lift()).amax() < 1e-10);
        }
    }

    #[test]
    fn rank_two_skew_with_roundoff_row() {
        // skew part of a conditioned inner matrix: one pair plus roundoff
        #[rustfmt::skip]
        let wa = DMatrix::from_row_slice(5, 5, &[
            1.0, 0.9311916391701983, -0.8363958161402298, -0.31988145758406417, 0.33508511374768446,
            0.9311916391701983, 0.8671178688604808, 1.6470219327775621, 2.1722444880985834, 0.35494660446677395,
            -0.8363958161402296, -3.2047115148309944, 0.6995579612568812, 0.16165660162985995, 0.5802165986346495,
            -0.3198814575840643, -2.767986365754298, 0.37343842393844007, 0.10232414690610558, 0.770861760119249,
            0.3350851137476846, 0.26911030819770376, -1.1407441730135228, -0.9852367893199117, 0.11228203345529875,
        ]);
        let s = linalg::skew_part(&wa);
        let f = youla_decompose(&s).unwrap();
        check_youla(&s, &f);
        assert_eq!(f.len(), 1);
        let sv = s.singular_values();
        assert!((f.sigmas[0] - sv.max()).abs() < 1e-12 * sv.max());
        let lift = f.symmetric_lift();
        assert!((&lift * &lift - s.transpose() * &s).amax() < 1e-12);
    }

    #[test]
    fn youla_rejects_non_skew() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -2.0, 0.0]);
        assert!(matches!(youla_decompose(&m), Err(NdppError::NotSkew(_))));
    }

    #[test]
    fn symmetrize_fixed_point_on_symmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(symmetrize_proposal(&m).unwrap(), m);
    }

    #[test]
    fn symmetrize_two_by_two() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -2.0, 1.0]);
        let w = symmetrize_proposal(&m).unwrap();
        assert!((&w - DMatrix::identity(2, 2) * 3.0).amax() < 1e-14);
        assert!(linalg::det(&w) >= linalg::det(&m));
    }

    #[test]
    fn symmetrize_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(symmetrize_proposal(&m), Err(NdppError::NotPsd(_))));
    }

    #[test]
    fn symmetrized_minors_dominate_in_inner_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = random_matrix(4, &mut rng);
            let m = random_matrix(4, &mut rng);
            let w = &a * a.transpose() + (&m - m.transpose());
            let what = symmetrize_proposal(&w).unwrap();
            for size in 1..=4 {
                for s in (0..4).combinations(size) {
                    let lhs = linalg::det(&w.select_rows(&s).select_columns(&s));
                    let rhs = linalg::det(&what.select_rows(&s).select_columns(&s));
                    assert!(rhs >= lhs - 1e-9 * rhs.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn identity_kernel_spectrum() {
        let k = LowRankKernel::symmetric(DMatrix::identity(6, 3)).unwrap();
        let lam = nonzero_eigvals(&k).unwrap();
        assert_eq!(lam.len(), 3);
        for l in lam {
            assert!((l.re - 1.0).abs() < 1e-14 && l.im == 0.0);
        }
    }

    #[test]
    fn spectrum_matches_dense_kernel() {
        let k = crate::kernel::synth_kernel(8, 4, 17).unwrap();
        let lam = nonzero_eigvals(&k).unwrap();
        let dense = k.dense().complex_eigenvalues();
        let mut dense: Vec<Complex64> = dense.iter().copied().filter(|z| z.norm() > 1e-9).collect();
        assert_eq!(dense.len(), 4);
        for l in &lam {
            let (pos, dist) = dense
                .iter()
                .enumerate()
                .map(|(i, z)| (i, (z - l).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(dist <= 1e-8, "{l} unmatched ({dist:e})");
            dense.swap_remove(pos);
        }
        let trace = (k.w() * k.gram()).trace();
        let sum: f64 = lam.iter().map(|z| z.re).sum();
        assert!((sum - trace).abs() <= 1e-10 * trace.abs());
    }

    #[test]
    fn elementary_small_cases() {
        let t = elementary_symmetric(&[2.0, 3.0]).unwrap();
        assert_eq!(t.e(0), 1.0);
        assert_eq!(t.e(1), 5.0);
        assert_eq!(t.e(2), 6.0);
        assert_eq!(t.get(1, 2), 0.0);
        let empty = elementary_symmetric(&[]).unwrap();
        assert_eq!(empty.top_row(), &[1.0]);
        assert!(elementary_symmetric(&[1.0, -0.5]).is_err());
        let tiny = elementary_symmetric(&[1.0, -1e-12]).unwrap();
        assert_eq!(tiny.lambdas()[1], 0.0);
    }

    #[test]
    fn elementary_matches_subset_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lam: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..3.0)).collect();
        let t = elementary_symmetric(&lam).unwrap();
        for k in 0..=6 {
            let brute: f64 = (0..6)
                .combinations(k)
                .map(|s| s.iter().map(|&i| lam[i]).product::<f64>())
                .sum();
            assert!((t.e(k) - brute).abs() <= 1e-12 * brute.max(1e-300), "k={k}");
        }
        for j in 1..=6 {
            assert_eq!(t.get(j, 0), 1.0);
            for k in 1..=j {
                let rec = t.get(j - 1, k) + lam[j - 1] * t.get(j - 1, k - 1);
                assert_eq!(t.get(j, k), rec);
            }
        }
    }

    #[test]
    fn complex_esp_matches_real_polynomial() {
        // (x − (1+2i))(x − (1−2i))(x − 3): e1 = 5, e2 = 5 + 6 = 11, e3 = 15
        let lam = [
            Complex64::new(1.0, 2.0),
            Complex64::new(1.0, -2.0),
            Complex64::new(3.0, 0.0),
        ];
        let e = real_esp(&lam, 10).unwrap();
        assert_eq!(e.len(), 4);
        for (got, want) in e.iter().zip([1.0, 5.0, 11.0, 15.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let e = real_esp(&lam, 2).unwrap();
        assert_eq!(e[3], 0.0);
        assert!(real_esp(&[Complex64::new(1.0, 1.0)], 3).is_err());
    }

    #[test]
    fn elementary_subset_single_support() {
        let t = elementary_symmetric(&[1.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_elementary_subset(&t, 1, &mut rng).unwrap(), vec![0]);
        }
        assert!(sample_elementary_subset(&t, 2, &mut rng).is_err());
        assert!(sample_elementary_subset(&t, 4, &mut rng).is_err());
    }

    #[test]
    fn elementary_subset_frequencies() {
        let t = elementary_symmetric(&[3.0, 2.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = std::collections::BTreeMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            *counts
                .entry(sample_elementary_subset(&t, 2, &mut rng).unwrap())
                .or_insert(0usize) += 1;
        }
        let expect = [
            (vec![0, 1], 6.0 / 11.0),
            (vec![0, 2], 3.0 / 11.0),
            (vec![1, 2], 2.0 / 11.0),
        ];
        for (s, p) in expect {
            let f = counts[&s] as f64 / draws as f64;
            assert!((f - p).abs() <= 0.01, "{s:?}: {f} vs {p}");
        }
    }

    #[test]
    fn size_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = elementary_symmetric(&[1.0, 1.0]).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[sample_size(t.top_row(), &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip([0.25, 0.5, 0.25]) {
            assert!((*c as f64 / 1e5 - p).abs() <= 0.01);
        }
        let z = elementary_symmetric(&[0.0, 0.0]).unwrap();
        for _ in 0..50 {
            assert_eq!(sample_size(z.top_row(), &mut rng).unwrap(), 0);
        }
        assert!(sample_size(&[0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn pseudo_inverse_square_roots() {
        let u = pseudo_inv_sqrt(&(DMatrix::identity(3, 3) * 4.0), 1e-10).unwrap();
        assert!((u - DMatrix::identity(3, 3) * 0.5).amax() < 1e-14);

        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let u = pseudo_inv_sqrt(&m, 1e-10).unwrap();
        assert!((&u - &m).amax() < 1e-14);
        assert!((&u * &m * &u - &m).amax() < 1e-14);

        assert!(pseudo_inv_sqrt(&DMatrix::zeros(3, 3), 1e-10).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            pseudo_inv_sqrt(&indefinite, 1e-10),
            Err(NdppError::NotPsd(_))
        ));
    }

    #[test]
    fn pseudo_inverse_projects_onto_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let m = &f * f.transpose();
        let u = pseudo_inv_sqrt(&m, 1e-10).unwrap();
        let p = &f * (f.tr_mul(&f)).try_inverse().unwrap() * f.transpose();
        assert!((&u * &m * &u - p).norm() <= 1e-9);

        let r = psd_sqrt(&m, 1e-10).unwrap();
        assert!((&r * &r - &m).norm() <= 1e-12 * m.norm());
    }
}
