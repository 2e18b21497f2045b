//! Brute-force distributions for small ground sets, distances between
//! subset distributions, the Gelman–Rubin diagnostic and the rejection bound.

use std::collections::BTreeMap;
use std::io::Write;

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{NdppError, Result};
use crate::kernel::{det_tolerance, LowRankKernel};
use crate::linalg::{self, EPS_EIG};
use crate::spectral;

/// Largest number of subsets an exact table may enumerate.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;
/// Largest number of pairs [`kappa_bound`] and [`expected_trials`] enumerate.
pub const PAIR_BUDGET: u128 = 1_000_000;

/// A subset distribution keyed by ascending index tuples.
pub type SubsetDist = BTreeMap<Vec<usize>, f64>;

/// `C(n, k)` without overflow for the sizes we care about.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exact subset probabilities obtained by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactTable {
    pub entries: SubsetDist,
    /// Sum of the determinants before normalization.
    pub normalizer: f64,
}

impl ExactTable {
    fn from_dets(dets: Vec<(Vec<usize>, f64, f64)>) -> Result<Self> {
        let normalizer: f64 = dets.iter().map(|(_, v, _)| v).sum();
        if !(normalizer > 0.0) {
            return Err(NdppError::NoSupport(
                "every enumerated determinant is zero".into(),
            ));
        }
        let kept: Vec<(Vec<usize>, f64)> = dets
            .into_iter()
            .filter(|(_, v, tol)| v > tol)
            .map(|(s, v, _)| (s, v))
            .collect();
        let support: f64 = kept.iter().map(|(_, v)| v).sum();
        if !(support > 0.0) {
            return Err(NdppError::NoSupport(
                "every determinant is below the roundoff floor".into(),
            ));
        }
        let entries = kept.into_iter().map(|(s, v)| (s, v / support)).collect();
        Ok(Self {
            entries,
            normalizer,
        })
    }

    pub fn prob(&self, subset: &[usize]) -> f64 {
        self.entries.get(subset).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Pr(|S| = j)` for `j = 0..=max_size`.
    pub fn size_marginal(&self, max_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; max_size + 1];
        for (s, p) in &self.entries {
            if s.len() <= max_size {
                out[s.len()] += p;
            }
        }
        out
    }

    /// `count` i.i.d. draws from the table.
    pub fn sample_iid<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> SubsetCounts {
        let keys: Vec<&Vec<usize>> = self.entries.keys().collect();
        let mut cdf = Vec::with_capacity(keys.len());
        let mut acc = 0.0;
        for p in self.entries.values() {
            acc += p;
            cdf.push(acc);
        }
        let mut counts = SubsetCounts::default();
        for _ in 0..count {
            let u = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(keys.len() - 1);
            counts.add(keys[i].clone());
        }
        counts
    }

    /// CSV with header `subset,probability`; subsets are dash-joined indices
    /// (empty for ∅).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subset", "probability"])
            .map_err(csv_error)?;
        for (s, p) in &self.entries {
            w.write_record([subset_label(s), format!("{p:.16e}")])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> NdppError {
    NdppError::Format(e.to_string())
}

/// `"0-3-7"` style label used in CSV output.
pub fn subset_label(s: &[usize]) -> String {
    s.iter().map(|i| i.to_string()).join("-")
}

fn enumerate_dets(
    kernel: &LowRankKernel,
    sizes: impl Iterator<Item = usize>,
) -> Result<Vec<(Vec<usize>, f64, f64)>> {
    let mut out = Vec::new();
    for k in sizes {
        for s in (0..kernel.n()).combinations(k) {
            if k > kernel.rank() {
                out.push((s, 0.0, 0.0));
                continue;
            }
            let (det, tol) = kernel.det_and_tolerance(&s)?;
            out.push((s, det, tol));
        }
    }
    Ok(out)
}

/// `Pr(S) = det(L_S) / Σ_{|T|=k} det(L_T)` over all size-`k` subsets.
pub fn exact_kndpp_table(kernel: &LowRankKernel, k: usize) -> Result<ExactTable> {
    let needed = binomial(kernel.n(), k);
    if needed > ENUMERATION_BUDGET {
        return Err(NdppError::BudgetExceeded {
            needed,
            budget: ENUMERATION_BUDGET,
        });
    }
    ExactTable::from_dets(enumerate_dets(kernel, std::iter::once(k))?)
}

/// `Pr(S) = det(L_S) / det(L + I)` over all `2^n` subsets.
pub fn exact_ndpp_table(kernel: &LowRankKernel) -> Result<ExactTable> {
    let n = kernel.n();
    let needed = if n >= 127 { u128::MAX } else { 1u128 << n };
    if needed > ENUMERATION_BUDGET {
        return Err(NdppError::BudgetExceeded {
            needed,
            budget: ENUMERATION_BUDGET,
        });
    }
    ExactTable::from_dets(enumerate_dets(kernel, 0..=n)?)
}

/// Empirical counts of sampled subsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubsetCounts {
    pub counts: BTreeMap<Vec<usize>, u64>,
    pub total: u64,
}

impl SubsetCounts {
    /// Records one subset; the key is sorted first.
    pub fn add(&mut self, mut subset: Vec<usize>) {
        subset.sort_unstable();
        *self.counts.entry(subset).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn distribution(&self) -> SubsetDist {
        let t = self.total.max(1) as f64;
        self.counts
            .iter()
            .map(|(s, &c)| (s.clone(), c as f64 / t))
            .collect()
    }

    /// Empirical `Pr(|S| = j)` for `j = 0..=max_size`.
    pub fn size_marginal(&self, max_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; max_size + 1];
        let t = self.total.max(1) as f64;
        for (s, &c) in &self.counts {
            if s.len() <= max_size {
                out[s.len()] += c as f64 / t;
            }
        }
        out
    }
}

impl FromIterator<Vec<usize>> for SubsetCounts {
    fn from_iter<I: IntoIterator<Item = Vec<usize>>>(iter: I) -> Self {
        let mut c = Self::default();
        for s in iter {
            c.add(s);
        }
        c
    }
}

/// `max_S |p(S) − q(S)|` over the union of supports.
pub fn tv_distance(p: &SubsetDist, q: &SubsetDist) -> f64 {
    let mut worst = 0.0_f64;
    for (s, &a) in p {
        worst = worst.max((a - q.get(s).copied().unwrap_or(0.0)).abs());
    }
    for (s, &b) in q {
        if !p.contains_key(s) {
            worst = worst.max(b.abs());
        }
    }
    worst
}

/// [`tv_distance`] for distributions over `0..len`; the shorter input is
/// padded with zeros.
pub fn tv_distance_vec(p: &[f64], q: &[f64]) -> f64 {
    (0..p.len().max(q.len()))
        .map(|i| (p.get(i).copied().unwrap_or(0.0) - q.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Pearson goodness-of-fit result.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson χ² of `counts` against `probs` (same indexing). Cells with an
/// expected count below 5 are pooled into one cell; an observation in a
/// zero-probability cell gives `p = 0`.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    if counts.len() != probs.len() {
        return Err(NdppError::Dimension(
            "counts and probabilities differ in length".into(),
        ));
    }
    let total: u64 = counts.iter().sum();
    let psum: f64 = probs.iter().sum();
    if total == 0 || !(psum > 0.0) {
        return Err(NdppError::InvalidArgument(
            "empty sample or distribution".into(),
        ));
    }
    let n = total as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let expected = n * p.max(0.0) / psum;
        if expected <= 0.0 {
            if c > 0 {
                return Ok(ChiSquare {
                    statistic: f64::INFINITY,
                    dof: 0,
                    p_value: 0.0,
                });
            }
            continue;
        }
        if expected < 5.0 {
            pooled_obs += c as f64;
            pooled_exp += expected;
        } else {
            cells.push((c as f64, expected));
        }
    }
    if pooled_exp > 0.0 {
        cells.push((pooled_obs, pooled_exp));
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cells.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist =
            ChiSquared::new(dof as f64).map_err(|e| NdppError::InvalidArgument(e.to_string()))?;
        dist.sf(statistic)
    };
    Ok(ChiSquare {
        statistic,
        dof,
        p_value,
    })
}

/// Gelman–Rubin `R̂ = √(((n−1)/n · W + B/n) / W)` for `m ≥ 2` chains of
/// equal length `n ≥ 2`. `W = 0` gives `+∞` when `B > 0`; when both vanish
/// the ratio is taken as `(n−1)/n`.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(NdppError::InvalidArgument(
            "psrf needs at least two chains".into(),
        ));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(NdppError::InvalidArgument(
            "chains must share a length of at least 2".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let shrink = (nf - 1.0) / nf;
    if w == 0.0 {
        return Ok(if b > 0.0 {
            f64::INFINITY
        } else {
            shrink.sqrt()
        });
    }
    Ok(((shrink * w + b / nf) / w).sqrt())
}

/// Rejection-bound diagnostic for one conditioning set.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaReport {
    pub kappa: f64,
    /// `(1 + σ_max(X)² κ_A)²`, an upper bound on the expected number of
    /// proposals per accepted pair.
    pub bound: f64,
    pub sigma_max_x_sq: f64,
    pub skew_norm: f64,
    pub min_pair_sigma: f64,
}

fn outside_pairs(kernel: &LowRankKernel, a_set: &[usize]) -> Result<Vec<usize>> {
    let rest: Vec<usize> = (0..kernel.n()).filter(|i| !a_set.contains(i)).collect();
    let needed = binomial(rest.len(), 2);
    if needed > PAIR_BUDGET {
        return Err(NdppError::BudgetExceeded {
            needed,
            budget: PAIR_BUDGET,
        });
    }
    Ok(rest)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else if m.iter().any(|v| !v.is_finite()) {
        f64::NAN
    } else {
        m.singular_values().max()
    }
}

/// `κ_A = σ_max(W^A − W^Aᵀ) / min_Y σ_min([X(W^A + W^Aᵀ)Xᵀ]_Y)` over pairs
/// `Y` outside `A`, and the bound `(1 + σ_max(X)² κ_A)²`. A vanishing
/// denominator gives `κ_A = ∞` unless the skew part is zero too.
pub fn kappa_bound(kernel: &LowRankKernel, a_set: &[usize]) -> Result<KappaReport> {
    let rest = outside_pairs(kernel, a_set)?;
    let wa = kernel.condition_inner(kernel.w(), a_set)?.wa;
    let skew_norm = spectral_norm(&(&wa - wa.transpose()));
    let sym = &wa + wa.transpose();
    let x = kernel.x();
    let rows: Vec<Vec<f64>> = (0..kernel.n()).map(|i| linalg::row_vec(x, i)).collect();
    let mut min_pair_sigma = f64::INFINITY;
    for (i, &a) in rest.iter().enumerate() {
        for &b in &rest[i + 1..] {
            let (xa, xb) = (&rows[a], &rows[b]);
            let (p, q) = (linalg::quad_form(&sym, xa), linalg::quad_form(&sym, xb));
            let r = linalg::bilinear(&sym, xa, xb);
            // smallest eigenvalue of the symmetric 2×2 [[p, r], [r, q]]
            let lo = 0.5 * (p + q) - (0.25 * (p - q) * (p - q) + r * r).sqrt();
            min_pair_sigma = min_pair_sigma.min(lo.abs());
        }
    }
    let sigma_x = spectral_norm(x);
    let sigma_max_x_sq = sigma_x * sigma_x;
    let floor = EPS_EIG * linalg::max_abs(&sym).max(f64::MIN_POSITIVE) * sigma_max_x_sq;
    let kappa = if skew_norm == 0.0 {
        0.0
    } else if !(min_pair_sigma > floor) {
        f64::INFINITY
    } else {
        skew_norm / min_pair_sigma
    };
    let bound = (1.0 + sigma_max_x_sq * kappa).powi(2);
    Ok(KappaReport {
        kappa,
        bound,
        sigma_max_x_sq,
        skew_norm,
        min_pair_sigma,
    })
}

/// `Σ_Y det([X Ŵ^A Xᵀ]_Y) / Σ_Y det([X W^A Xᵀ]_Y)` over pairs outside `A`:
/// the exact mean number of proposals (rejections + 1) per up-operator call.
pub fn expected_trials(kernel: &LowRankKernel, a_set: &[usize]) -> Result<f64> {
    let rest = outside_pairs(kernel, a_set)?;
    let wa = kernel.condition_inner(kernel.w(), a_set)?.wa;
    let what = spectral::symmetrize_proposal(&wa)?;
    let x = kernel.x();
    let rows: Vec<Vec<f64>> = (0..kernel.n()).map(|i| linalg::row_vec(x, i)).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &a) in rest.iter().enumerate() {
        for &b in &rest[i + 1..] {
            num += crate::samplers::pair_det(&what, &rows[a], &rows[b]);
            den += crate::samplers::pair_det(&wa, &rows[a], &rows[b]).max(0.0);
        }
    }
    if !(den > 0.0) {
        return Err(NdppError::NoSupport(
            "conditional kernel has no positive pair minor".into(),
        ));
    }
    Ok(num / den)
}

/// Per-subset check that the proposal dominates the target:
/// returns `max_S (det([XW^AXᵀ]_S) − det([XŴ^AXᵀ]_S))` over every subset of
/// the ground set (positive values are violations) and the largest
/// `|difference|` among subsets of size at least `d`.
pub fn dominance_gap(
    kernel: &LowRankKernel,
    wa: &DMatrix<f64>,
    what: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let n = kernel.n();
    if n >= 64 || (1u128 << n) > ENUMERATION_BUDGET {
        return Err(NdppError::BudgetExceeded {
            needed: 1u128 << n.min(126),
            budget: ENUMERATION_BUDGET,
        });
    }
    let d = kernel.rank();
    let x = kernel.x();
    let (mut worst, mut worst_full) = (f64::NEG_INFINITY, 0.0_f64);
    for size in 1..=n {
        for s in (0..n).combinations(size) {
            let xs = x.select_rows(&s);
            let gt = &xs * wa * xs.transpose();
            let gp = &xs * what * xs.transpose();
            let diff = linalg::det(&gt) - linalg::det(&gp);
            worst = worst.max(diff);
            if size >= d {
                worst_full = worst_full.max(diff.abs());
            }
        }
    }
    Ok((worst, worst_full))
}

/// Roundoff floor for a principal minor of `X M Xᵀ` on `subset`.
pub fn minor_tolerance(kernel: &LowRankKernel, inner: &DMatrix<f64>, subset: &[usize]) -> f64 {
    let xs = kernel.rows(subset);
    det_tolerance(&(&xs * inner * xs.transpose()))
}
