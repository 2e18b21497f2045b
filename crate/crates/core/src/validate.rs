//! Desk-scale invariant suites run by `ndpp validate`.
//!
//! Exact checks need no randomness. Statistical checks draw `budget`
//! samples each and are skipped when the budget is zero. Errors inside a
//! check count as failures of that check; the suite always completes.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{NdppError, Result};
use crate::experiments::stream_rng;
use crate::kernel::LowRankKernel;
use crate::linalg::{self, EPS_EIG, EPS_LIN};
use crate::oracle::{self, binomial, SubsetCounts};
use crate::samplers::{self, ChainConfig, NdppConfig, Prepared, UpProposal};
use crate::spectral::{self, NdppSpectrum};

/// Subsets enumerated by an exact check before it is skipped.
pub const EXACT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(Check {
            name,
            passed,
            detail,
        });
    }
}

/// One line per check: `PASS|FAIL<TAB>name<TAB>detail`.
impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{}\t{}\t{}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Runs every suite against `kernel`.
pub fn validate_kernel(kernel: &LowRankKernel, budget: usize, seed: u64) -> ValidationReport {
    let mut r = ValidationReport::default();
    r.record("kernel_symmetric_part_psd", check_symmetric_part(kernel));
    r.record("kernel_nonnegative_minors", check_minors(kernel));
    r.record("conditional_zero_rows", check_conditional(kernel));
    r.record("youla_reconstruction", check_youla(kernel));
    r.record("proposal_dominance", check_dominance(kernel));
    r.record("normalizer", check_normalizer(kernel));
    r.record("tree_aggregates", check_tree(kernel));
    if budget > 0 {
        r.record("kndpp_tv", check_kndpp_tv(kernel, budget, seed));
        r.record("size_marginal", check_size_marginal(kernel, budget, seed));
        r.record("rejection_bound", check_rejections(kernel, budget, seed));
    }
    r
}

fn check_symmetric_part(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let sym = linalg::symmetric_part(kernel.w());
    let (vals, _) = linalg::sorted_sym_eigen(&sym);
    let lowest = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let ok = lowest >= -EPS_EIG * vals[0].abs().max(1.0);
    Ok((ok, format!("lowest eigenvalue of (W+W^T)/2 = {lowest:.3e}")))
}

fn check_minors(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let n = kernel.n();
    let sizes = 1..=kernel.rank().min(n);
    let total: u128 = sizes.clone().map(|k| binomial(n, k)).sum();
    let checked_sizes: Vec<usize> = if total <= EXACT_BUDGET {
        sizes.collect()
    } else {
        sizes
            .filter(|&k| binomial(n, k) <= EXACT_BUDGET / 8)
            .collect()
    };
    let mut count = 0u64;
    for &k in &checked_sizes {
        for s in itertools::Itertools::combinations(0..n, k) {
            kernel.det_subset(&s)?;
            count += 1;
        }
    }
    Ok((
        true,
        format!("{count} minors over sizes {checked_sizes:?} within the roundoff floor"),
    ))
}

/// Deterministic conditioning sets: prefixes of the greedy MAP sequence.
fn conditioning_sets(kernel: &LowRankKernel) -> Result<Vec<Vec<usize>>> {
    let d = kernel.rank();
    let greedy = samplers::greedy_map(kernel, d.saturating_sub(2))?;
    let mut out = vec![Vec::new()];
    for j in 1..=greedy.items.len() {
        let mut a = greedy.items[..j].to_vec();
        a.sort_unstable();
        out.push(a);
    }
    Ok(out)
}

fn check_conditional(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let mut worst = 0.0_f64;
    let sets = conditioning_sets(kernel)?;
    for a in &sets[1..] {
        let wa = kernel.condition_inner(kernel.w(), a)?.wa;
        let xa = kernel.rows(a);
        let scale = linalg::max_abs(&xa).powi(2) * linalg::max_abs(kernel.w()).max(1.0);
        worst = worst.max(linalg::max_abs(&(&xa * &wa)) / scale.max(f64::MIN_POSITIVE));
        worst = worst.max(linalg::max_abs(&(&wa * xa.transpose())) / scale.max(f64::MIN_POSITIVE));
    }
    Ok((
        worst <= EPS_LIN,
        format!(
            "max relative |X_A W^A| = {worst:.3e} over {} sets",
            sets.len() - 1
        ),
    ))
}

fn check_youla(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let mut worst = 0.0_f64;
    for a in conditioning_sets(kernel)? {
        let wa = kernel.condition_inner(kernel.w(), &a)?.wa;
        let skew = linalg::skew_part(&wa);
        let f = spectral::youla_decompose(&skew)?;
        let err = linalg::max_abs(&(f.reconstruct() - &skew)) / linalg::max_abs(&skew).max(1.0);
        let basis = DMatrix::from_columns(
            &(0..f.len())
                .flat_map(|i| [f.y.column(i).into_owned(), f.z.column(i).into_owned()])
                .collect::<Vec<_>>(),
        );
        let ortho = if f.is_empty() {
            0.0
        } else {
            linalg::max_abs(&(basis.tr_mul(&basis) - DMatrix::identity(2 * f.len(), 2 * f.len())))
        };
        worst = worst.max(err).max(ortho);
    }
    Ok((
        worst <= EPS_LIN,
        format!("max reconstruction/orthonormality error {worst:.3e}"),
    ))
}

fn check_dominance(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let n = kernel.n();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_full = 0.0_f64;
    let sets = conditioning_sets(kernel)?;
    if n > 16 {
        // pairs only: the sizes the up operator actually proposes
        for a in &sets {
            let wa = kernel.condition_inner(kernel.w(), a)?.wa;
            let what = spectral::symmetrize_proposal(&wa)?;
            let rows: Vec<Vec<f64>> = (0..n).map(|i| linalg::row_vec(kernel.x(), i)).collect();
            let limit = n.min(400);
            for i in 0..limit {
                for j in i + 1..limit {
                    let t = samplers::pair_det(&wa, &rows[i], &rows[j]);
                    let p = samplers::pair_det(&what, &rows[i], &rows[j]);
                    worst = worst.max(t - p);
                }
            }
        }
        return Ok((
            worst <= 1e-9,
            format!("max pair det(target) - det(proposal) = {worst:.3e}"),
        ));
    }
    for a in &sets {
        let wa = kernel.condition_inner(kernel.w(), a)?.wa;
        let what = spectral::symmetrize_proposal(&wa)?;
        let (gap, full) = oracle::dominance_gap(kernel, &wa, &what)?;
        worst = worst.max(gap);
        worst_full = worst_full.max(full);
    }
    let ok = worst <= 1e-9 && worst_full <= 1e-9;
    Ok((ok, format!("max det(target) - det(proposal) = {worst:.3e}; max |gap| at |S| >= d = {worst_full:.3e}")))
}

fn check_normalizer(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let spectrum = NdppSpectrum::from_kernel(kernel)?;
    let n = kernel.n();
    let mut worst = 0.0_f64;
    let mut sizes = Vec::new();
    for k in 1..=kernel.rank().min(n) {
        if binomial(n, k) > EXACT_BUDGET {
            continue;
        }
        let table = oracle::exact_kndpp_table(kernel, k)?;
        let e = spectrum.esp[k];
        let rel = (table.normalizer - e).abs() / e.abs().max(f64::MIN_POSITIVE);
        if !rel.is_finite() {
            return Ok((false, format!("non-finite normalizer at k = {k}")));
        }
        worst = worst.max(rel);
        sizes.push(k);
    }
    Ok((
        worst <= 1e-8,
        format!("max relative |sum det - e_k| = {worst:.3e} for k in {sizes:?}"),
    ))
}

fn check_tree(kernel: &LowRankKernel) -> Result<(bool, String)> {
    let prep = Prepared::new(kernel, None)?;
    let root = prep.tree.aggregate(prep.tree.root());
    let err = linalg::max_abs(&(root - &prep.gram)) / linalg::max_abs(&prep.gram).max(1.0);
    let mut worst = err;
    for (i, node) in prep.tree.nodes().iter().enumerate() {
        if let Some((l, r)) = node.children {
            let sum = prep.tree.aggregate(l) + prep.tree.aggregate(r);
            let e = linalg::max_abs(&(sum - prep.tree.aggregate(i)))
                / linalg::max_abs(&prep.gram).max(1.0);
            worst = worst.max(e);
        }
    }
    Ok((
        worst <= EPS_LIN,
        format!(
            "max relative aggregate error {worst:.3e} over {} nodes",
            prep.tree.nodes().len()
        ),
    ))
}

/// Allowed excess of the chain's TV over the i.i.d. baseline.
fn tv_slack(draws: usize) -> f64 {
    0.02 + 2.0 / (draws as f64).sqrt()
}

fn check_kndpp_tv(kernel: &LowRankKernel, budget: usize, seed: u64) -> Result<(bool, String)> {
    let n = kernel.n();
    let k = (kernel.rank().min(n) / 2).max(2);
    if binomial(n, k) > EXACT_BUDGET {
        return Ok((
            true,
            format!("skipped: C({n}, {k}) exceeds the enumeration budget"),
        ));
    }
    let table = oracle::exact_kndpp_table(kernel, k)?;
    let prep = Prepared::new(kernel, None)?;
    let mut rng = stream_rng(seed, 0);
    let cfg = ChainConfig::new(k);
    let mut counts = SubsetCounts::default();
    for _ in 0..budget {
        counts.add(samplers::mcmc_kndpp(kernel, &prep, &cfg, &mut rng)?.subset);
    }
    let baseline = table.sample_iid(budget, &mut stream_rng(seed, 1));
    let tv = oracle::tv_distance(&counts.distribution(), &table.entries);
    let base = oracle::tv_distance(&baseline.distribution(), &table.entries);
    let slack = tv_slack(budget);
    Ok((
        tv <= base + slack,
        format!("k = {k}: tv = {tv:.4}, iid baseline = {base:.4}, slack = {slack:.4}"),
    ))
}

fn check_size_marginal(kernel: &LowRankKernel, budget: usize, seed: u64) -> Result<(bool, String)> {
    let spectrum = NdppSpectrum::from_kernel(kernel)?;
    let prep = Prepared::new(kernel, None)?;
    let mut rng = stream_rng(seed, 2);
    let d = kernel.rank();
    let mut counts = SubsetCounts::default();
    for _ in 0..budget {
        counts.add(
            samplers::mcmc_ndpp(kernel, &prep, &spectrum, &NdppConfig::default(), &mut rng)?.subset,
        );
    }
    let expect = spectrum.size_probabilities();
    let tv = oracle::tv_distance_vec(
        &counts.size_marginal(d),
        &expect[..=d.min(expect.len() - 1)],
    );
    let slack = tv_slack(budget);
    Ok((
        tv <= slack,
        format!("size-marginal tv = {tv:.4}, allowed {slack:.4}"),
    ))
}

fn check_rejections(kernel: &LowRankKernel, budget: usize, seed: u64) -> Result<(bool, String)> {
    let report = match oracle::kappa_bound(kernel, &[]) {
        Ok(r) => r,
        Err(NdppError::BudgetExceeded { .. }) => {
            return Ok((true, "skipped: too many pairs to enumerate".into()))
        }
        Err(e) => return Err(e),
    };
    let prep = Prepared::new(kernel, None)?;
    let up = UpProposal::new(kernel, &prep, &[])?;
    let mut rng = stream_rng(seed, 3);
    let mut trials = 0u64;
    let mut max_ratio = 0.0_f64;
    for _ in 0..budget {
        let draw = up.draw(kernel, &prep.tree, &mut rng, samplers::DEFAULT_MAX_REJECTS)?;
        trials += draw.rejections + 1;
        max_ratio = max_ratio.max(draw.max_ratio);
    }
    let mean = trials as f64 / budget as f64;
    let ok = mean <= report.bound && max_ratio <= 1.0 + 1e-9;
    Ok((
        ok,
        format!(
            "mean trials = {mean:.4}, bound = {:.4e}, max acceptance ratio = {max_ratio:.6}",
            report.bound
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::synth_kernel;

    #[test]
    fn synthetic_kernel_passes() {
        let kernel = synth_kernel(8, 4, 1).unwrap();
        let report = validate_kernel(&kernel, 2000, 7);
        assert!(report.passed(), "{report}");
        assert_eq!(report.checks.len(), 10);
    }

    #[test]
    fn zero_budget_runs_exact_checks_only() {
        let kernel = synth_kernel(8, 4, 1).unwrap();
        let report = validate_kernel(&kernel, 0, 7);
        assert!(report.passed(), "{report}");
        assert_eq!(report.checks.len(), 7);
        assert!(report
            .checks
            .iter()
            .all(|c| !["kndpp_tv", "size_marginal", "rejection_bound"].contains(&c.name)));
    }

    #[test]
    fn overflowing_kernel_fails_by_name() {
        let kernel = synth_kernel(8, 4, 1).unwrap();
        let v = kernel.v() * 1e160;
        let bad = LowRankKernel::new(v, kernel.b().clone(), kernel.d().clone()).unwrap();
        let report = validate_kernel(&bad, 0, 7);
        assert!(!report.passed());
        assert!(
            report.failures().any(|c| c.name == "normalizer"),
            "{report}"
        );
    }
}
