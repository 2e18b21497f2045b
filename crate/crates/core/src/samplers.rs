//! Tree-based k-DPP sampling, the rejection up operator, the pair-exchange
//! k-NDPP chain, unconstrained NDPP sampling and greedy MAP initialization.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;

use crate::error::{NdppError, Result};
use crate::kernel::{LowRankKernel, EPS_DET};
use crate::linalg::{self, EPS_EIG};
use crate::oracle;
use crate::spectral::{self, ElemSymTable, NdppSpectrum};
use crate::tree::{self, SampleTree};

/// Cap on rejections per up-operator call unless configured otherwise.
pub const DEFAULT_MAX_REJECTS: u64 = 1_000_000;
/// Eigenvalues of `Ŵ` and `U C U` below this fraction of the largest are zero.
pub const EIG_CUTOFF: f64 = 1e-10;
const INIT_RETRIES: usize = 100;
const CONDITION_RETRIES: usize = 100;
const ELEMENTARY_RETRIES: usize = 10;
const DUST_RETRIES: usize = 100;

/// `t_iter = k²`.
pub fn default_t_iter(k: usize) -> usize {
    k * k
}

/// Smallest `μ_min / μ_max` of `C` for which the `C^{±1/2}` route is used.
const GRAM_ROOT_RCOND: f64 = 1e-8;

/// Tree and Gram matrix for one kernel, shared by every chain.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub tree: SampleTree,
    pub gram: DMatrix<f64>,
    /// `(C^{1/2}, C^{−1/2})` when `C` is well conditioned.
    pub gram_root: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub build_time: Duration,
}

impl Prepared {
    /// `leaf_block = None` picks [`tree::default_leaf_block`].
    pub fn new(kernel: &LowRankKernel, leaf_block: Option<usize>) -> Result<Self> {
        let start = Instant::now();
        let block = leaf_block.unwrap_or_else(|| tree::default_leaf_block(kernel.n()));
        let tree = tree::build_tree(kernel.x(), block)?;
        let gram = kernel.gram();
        let gram_root = gram_roots(&gram);
        Ok(Self {
            tree,
            gram,
            gram_root,
            build_time: start.elapsed(),
        })
    }

    /// Tree k-DPP preprocessing for the proposal `what`.
    pub fn kdpp_proposal(&self, what: &DMatrix<f64>) -> Result<KdppProposal> {
        match &self.gram_root {
            Some((root, inv_root)) => KdppProposal::from_gram_root(root, inv_root, what),
            None => KdppProposal::new(&self.gram, what),
        }
    }
}

fn gram_roots(gram: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (vals, vecs) = linalg::sorted_sym_eigen(gram);
    let d = vals.len();
    if d == 0 || !(vals[d - 1] > GRAM_ROOT_RCOND * vals[0]) {
        return None;
    }
    let mut root = DMatrix::zeros(d, d);
    let mut inv_root = DMatrix::zeros(d, d);
    for i in 0..d {
        let u = vecs.column(i);
        let s = vals[i].sqrt();
        root.ger(s, &u, &u, 1.0);
        inv_root.ger(1.0 / s, &u, &u, 1.0);
    }
    Some((root, inv_root))
}

/// Everything the tree k-DPP sampler needs that depends only on `Ŵ`: the nonzero spectrum
/// `λ_i` of `X Ŵ Xᵀ` and vectors `w_i` such that `X w_i` are its orthonormal
/// eigenvectors, so that `Q = Σ_{i∈E} w_i w_iᵀ` is the elementary DPP's
/// marginal kernel in the `d`-dimensional coordinates.
#[derive(Debug, Clone)]
pub struct KdppProposal {
    table: ElemSymTable,
    basis: DMatrix<f64>,
}

impl KdppProposal {
    /// Route through `U = Ŵ^{1/2}`: eigenpairs `(λ_i, v_i)` of `U C U` give
    /// `w_i = U v_i / √λ_i`. Works for any Gram matrix.
    pub fn new(gram: &DMatrix<f64>, what: &DMatrix<f64>) -> Result<Self> {
        if gram.shape() != what.shape() || !gram.is_square() {
            return Err(NdppError::Dimension("gram and proposal must be d×d".into()));
        }
        let u = spectral::psd_sqrt(what, EIG_CUTOFF)?;
        let ucu = &u * gram * &u;
        let (vals, vecs) = linalg::sorted_sym_eigen(&linalg::symmetric_part(&ucu));
        let d = vals.len();
        let top = if d > 0 { vals[0].max(0.0) } else { 0.0 };
        let mut lambdas = vec![0.0; d];
        let mut basis = DMatrix::zeros(d, d);
        for i in 0..d {
            if vals[i] > EIG_CUTOFF * top {
                lambdas[i] = vals[i];
                let col: DVector<f64> = &u * vecs.column(i) / vals[i].sqrt();
                basis.set_column(i, &col);
            }
        }
        let table = spectral::elementary_symmetric(&lambdas)?;
        Ok(Self { table, basis })
    }

    /// Route through a fixed `C^{1/2}` (needs `C` invertible): eigenpairs
    /// `(λ_i, u_i)` of `C^{1/2} Ŵ C^{1/2}` give `w_i = C^{−1/2} u_i`. One
    /// eigendecomposition per proposal instead of two.
    pub fn from_gram_root(
        root: &DMatrix<f64>,
        inv_root: &DMatrix<f64>,
        what: &DMatrix<f64>,
    ) -> Result<Self> {
        if root.shape() != what.shape() || inv_root.shape() != what.shape() || !what.is_square() {
            return Err(NdppError::Dimension(
                "gram root and proposal must be d×d".into(),
            ));
        }
        let s = root * what * root;
        let (vals, vecs) = linalg::sorted_sym_eigen(&linalg::symmetric_part(&s));
        let d = vals.len();
        let top = if d > 0 { vals[0].max(0.0) } else { 0.0 };
        if d > 0 && vals[d - 1] < -EPS_EIG * top.max(f64::MIN_POSITIVE) {
            return Err(NdppError::NotPsd(vals[d - 1]));
        }
        let mut lambdas = vec![0.0; d];
        let mut basis = DMatrix::zeros(d, d);
        for i in 0..d {
            if vals[i] > EIG_CUTOFF * top {
                lambdas[i] = vals[i];
                let col: DVector<f64> = inv_root * vecs.column(i);
                basis.set_column(i, &col);
            }
        }
        let table = spectral::elementary_symmetric(&lambdas)?;
        Ok(Self { table, basis })
    }

    /// Nonzero eigenvalues of `X Ŵ Xᵀ`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        self.table.lambdas()
    }

    /// `e_k` of the eigenvalues, the normalizer of the proposal k-DPP.
    pub fn normalizer(&self, k: usize) -> f64 {
        if k > self.table.dim() {
            0.0
        } else {
            self.table.e(k)
        }
    }

    /// `Q = Σ_{i∈E} w_i w_iᵀ` for an index set `E` of the spectrum.
    pub fn query(&self, e: &[usize]) -> DMatrix<f64> {
        let d = self.basis.nrows();
        let mut q = DMatrix::zeros(d, d);
        for &i in e {
            let w = self.basis.column(i);
            q.ger(1.0, &w, &w, 1.0);
        }
        q
    }

    /// Draws `Y`, `|Y| = k`, with `Pr(Y) = det([X Ŵ Xᵀ]_Y) / e_k`. Ascending.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        tree: &SampleTree,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if tree.dim() != self.basis.nrows() {
            return Err(NdppError::Dimension(
                "tree and proposal dimensions differ".into(),
            ));
        }
        if k > tree.n() {
            return Err(NdppError::InvalidArgument(format!(
                "k = {k} exceeds n = {}",
                tree.n()
            )));
        }
        if !(self.normalizer(k) > 0.0) {
            return Err(NdppError::NoSupport(format!(
                "proposal has rank below k = {k}"
            )));
        }
        let mut last_err = None;
        for _ in 0..ELEMENTARY_RETRIES {
            let e = spectral::sample_elementary_subset(&self.table, k, rng)?;
            match self.sample_elementary(tree, self.query(&e), k, rng) {
                Ok(mut y) => {
                    y.sort_unstable();
                    return Ok(y);
                }
                Err(err @ (NdppError::NoSupport(_) | NdppError::SingularConditioning { .. })) => {
                    last_err = Some(err)
                }
                Err(err) => return Err(err),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn sample_elementary<R: Rng + ?Sized>(
        &self,
        tree: &SampleTree,
        mut q: DMatrix<f64>,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let d = q.nrows();
        let mut y = Vec::with_capacity(k);
        let mut qx = DVector::zeros(d);
        for _ in 0..k {
            let mut a = tree.traverse_sample(&q, rng)?;
            let mut tries = 0;
            while y.contains(&a) {
                tries += 1;
                if tries > DUST_RETRIES {
                    return Err(NdppError::NoSupport(
                        "only selected items carry mass".into(),
                    ));
                }
                a = tree.traverse_sample(&q, rng)?;
            }
            let x = tree.row(a);
            // Q is symmetric, so (Qx)_i is column i dotted with x
            for i in 0..d {
                qx[i] = linalg::frobenius_inner(q.column(i).as_slice(), x);
            }
            let c: f64 = qx.iter().zip(x).map(|(p, v)| p * v).sum();
            if !(c > 0.0) {
                return Err(NdppError::SingularConditioning {
                    subset: vec![a],
                    rcond: c,
                });
            }
            q.ger(-1.0 / c, &qx, &qx, 1.0);
            y.push(a);
        }
        Ok(y)
    }
}

/// One draw from the k-DPP with kernel `X Ŵ Xᵀ`.
pub fn tree_kdpp_sample<R: Rng + ?Sized>(
    tree: &SampleTree,
    what: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    KdppProposal::new(gram, what)?.sample(tree, k, rng)
}

/// Result of one up-operator call.
#[derive(Debug, Clone, PartialEq)]
pub struct UpDraw {
    pub pair: (usize, usize),
    pub rejections: u64,
    /// Largest acceptance ratio seen during the call (≤ 1 up to roundoff).
    pub max_ratio: f64,
}

/// Conditional target `W^A`, its symmetrized proposal `Ŵ^A` and the
/// matching k-DPP preprocessing. Built once per chain iteration.
#[derive(Debug, Clone)]
pub struct UpProposal {
    a_set: Vec<usize>,
    wa: DMatrix<f64>,
    what: DMatrix<f64>,
    kdpp: KdppProposal,
}

impl UpProposal {
    pub fn new(kernel: &LowRankKernel, prep: &Prepared, a_set: &[usize]) -> Result<Self> {
        let wa = kernel.condition_inner(kernel.w(), a_set)?.wa;
        let what = spectral::spectral_symmetrization(&wa)?;
        let kdpp = prep.kdpp_proposal(&what)?;
        Ok(Self {
            a_set: a_set.to_vec(),
            wa,
            what,
            kdpp,
        })
    }

    pub fn a_set(&self) -> &[usize] {
        &self.a_set
    }

    pub fn target_inner(&self) -> &DMatrix<f64> {
        &self.wa
    }

    pub fn proposal_inner(&self) -> &DMatrix<f64> {
        &self.what
    }

    /// `det([X W^A Xᵀ]_{ab}) / det([X Ŵ^A Xᵀ]_{ab})`; 0 when the proposal
    /// minor vanishes or the pair touches `A` (both minors are roundoff there).
    pub fn acceptance_ratio(&self, tree: &SampleTree, a: usize, b: usize) -> f64 {
        if self.a_set.contains(&a) || self.a_set.contains(&b) {
            return 0.0;
        }
        let (xa, xb) = (tree.row(a), tree.row(b));
        let target = pair_det(&self.wa, xa, xb);
        let proposal = pair_det(&self.what, xa, xb);
        if !(proposal > 0.0) {
            return 0.0;
        }
        (target / proposal).max(0.0)
    }

    /// Proposes pairs from the symmetric proposal until one is
    /// accepted.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        kernel: &LowRankKernel,
        tree: &SampleTree,
        rng: &mut R,
        max_rejects: u64,
    ) -> Result<UpDraw> {
        let mut rejections = 0u64;
        let mut max_ratio = 0.0_f64;
        loop {
            let y = self.kdpp.sample(tree, 2, rng)?;
            let (a, b) = (y[0], y[1]);
            let ratio = self.acceptance_ratio(tree, a, b);
            max_ratio = max_ratio.max(ratio);
            if rng.random::<f64>() < ratio {
                return Ok(UpDraw {
                    pair: (a, b),
                    rejections,
                    max_ratio,
                });
            }
            rejections += 1;
            if rejections > max_rejects {
                return Err(NdppError::TooManyRejections {
                    limit: max_rejects,
                    bound: describe_bound(kernel, &self.a_set),
                });
            }
        }
    }
}

fn describe_bound(kernel: &LowRankKernel, a_set: &[usize]) -> String {
    match oracle::kappa_bound(kernel, a_set) {
        Ok(report) => format!(
            "kappa_A = {:e}, expected trials <= {:e}",
            report.kappa, report.bound
        ),
        Err(e) => format!("kappa bound unavailable: {e}"),
    }
}

/// `det` of the 2×2 matrix `[x M xᵀ, x M yᵀ; y M xᵀ, y M yᵀ]`.
pub(crate) fn pair_det(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let xx = linalg::quad_form(m, x);
    let yy = linalg::quad_form(m, y);
    let xy = linalg::bilinear(m, x, y);
    let yx = linalg::bilinear(m, y, x);
    xx * yy - xy * yx
}

/// [`UpProposal::draw`] as a single call. Use [`UpProposal`] directly to reuse the
/// preprocessing across calls with the same `A`.
pub fn up_operator<R: Rng + ?Sized>(
    a_set: &[usize],
    kernel: &LowRankKernel,
    prep: &Prepared,
    rng: &mut R,
    max_rejects: u64,
) -> Result<UpDraw> {
    UpProposal::new(kernel, prep, a_set)?.draw(kernel, &prep.tree, rng, max_rejects)
}

/// How the chain picks its starting subset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Uniform size-k subsets until one has `det(L_S) > ε_det`, then greedy.
    #[default]
    UniformRetry,
    GreedyMap,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainConfig {
    pub k: usize,
    pub t_iter: usize,
    pub max_rejects: u64,
    pub init: InitPolicy,
}

impl ChainConfig {
    /// `t_iter = k²`, uniform-retry start, default rejection cap.
    pub fn new(k: usize) -> Self {
        Self {
            k,
            t_iter: default_t_iter(k),
            max_rejects: DEFAULT_MAX_REJECTS,
            init: InitPolicy::UniformRetry,
        }
    }

    pub fn with_t_iter(mut self, t_iter: usize) -> Self {
        self.t_iter = t_iter;
        self
    }

    pub fn with_init(mut self, init: InitPolicy) -> Self {
        self.init = init;
        self
    }

    pub fn with_max_rejects(mut self, max_rejects: u64) -> Self {
        self.max_rejects = max_rejects;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    /// Ascending item indices.
    pub subset: Vec<usize>,
    pub rejections: u64,
    pub per_iteration_rejections: Vec<u64>,
    pub elapsed: Duration,
}

/// A running pair-exchange chain over size-k subsets.
#[derive(Debug, Clone)]
pub struct KndppChain<'a> {
    kernel: &'a LowRankKernel,
    prep: &'a Prepared,
    state: Vec<usize>,
    max_rejects: u64,
    rejections: u64,
    per_iteration: Vec<u64>,
    // with k = 2 every iteration conditions on the empty set
    pair_proposal: Option<UpProposal>,
}

impl<'a> KndppChain<'a> {
    pub fn start<R: Rng + ?Sized>(
        kernel: &'a LowRankKernel,
        prep: &'a Prepared,
        k: usize,
        init: &InitPolicy,
        max_rejects: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, d) = (kernel.n(), kernel.rank());
        if k < 2 || k > d || k > n {
            return Err(NdppError::InvalidArgument(format!(
                "need 2 <= k <= min(d, n), got k = {k}, d = {d}, n = {n}"
            )));
        }
        if max_rejects < 1 {
            return Err(NdppError::InvalidArgument(
                "max_rejects must be at least 1".into(),
            ));
        }
        if prep.tree.n() != n || prep.tree.dim() != d {
            return Err(NdppError::Dimension("tree does not match kernel".into()));
        }
        let state = initial_state(kernel, k, init, rng)?;
        let pair_proposal = if k == 2 {
            Some(UpProposal::new(kernel, prep, &[])?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            prep,
            state,
            max_rejects,
            rejections: 0,
            per_iteration: Vec::new(),
            pair_proposal,
        })
    }

    /// Current subset, ascending.
    pub fn state(&self) -> &[usize] {
        &self.state
    }

    pub fn rejections(&self) -> u64 {
        self.rejections
    }

    /// One iteration: drop two random items and re-add a pair by the up
    /// operator. Returns that iteration's rejection count.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<u64> {
        let (mut next, draw) = match &self.pair_proposal {
            Some(p) => (
                Vec::with_capacity(2),
                p.draw(self.kernel, &self.prep.tree, rng, self.max_rejects)?,
            ),
            None => {
                let (a, proposal) = self.conditioned_proposal(rng)?;
                (
                    a,
                    proposal.draw(self.kernel, &self.prep.tree, rng, self.max_rejects)?,
                )
            }
        };
        next.push(draw.pair.0);
        next.push(draw.pair.1);
        next.sort_unstable();
        self.state = next;
        self.rejections += draw.rejections;
        self.per_iteration.push(draw.rejections);
        Ok(draw.rejections)
    }

    fn conditioned_proposal<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(Vec<usize>, UpProposal)> {
        let k = self.state.len();
        let mut last_err = None;
        for _ in 0..CONDITION_RETRIES {
            let mut a: Vec<usize> = index::sample(rng, k, k - 2)
                .iter()
                .map(|i| self.state[i])
                .collect();
            a.sort_unstable();
            match UpProposal::new(self.kernel, self.prep, &a) {
                Ok(p) => return Ok((a, p)),
                Err(e @ NdppError::SingularConditioning { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    pub fn into_report(self, elapsed: Duration) -> SampleReport {
        SampleReport {
            subset: self.state,
            rejections: self.rejections,
            per_iteration_rejections: self.per_iteration,
            elapsed,
        }
    }
}

fn initial_state<R: Rng + ?Sized>(
    kernel: &LowRankKernel,
    k: usize,
    init: &InitPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let usable = |s: &[usize]| -> Result<bool> {
        let (det, tol) = kernel.det_and_tolerance(s)?;
        Ok(det > tol)
    };
    match init {
        InitPolicy::Explicit(s) => {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != k {
                return Err(NdppError::InvalidArgument(format!(
                    "initial subset must have {k} distinct items"
                )));
            }
            if !usable(&s)? {
                return Err(NdppError::InitFailed(k));
            }
            Ok(s)
        }
        InitPolicy::UniformRetry => {
            for _ in 0..INIT_RETRIES {
                let mut s = index::sample(rng, kernel.n(), k).into_vec();
                s.sort_unstable();
                if usable(&s)? {
                    return Ok(s);
                }
            }
            greedy_state(kernel, k)
        }
        InitPolicy::GreedyMap => greedy_state(kernel, k),
    }
}

fn greedy_state(kernel: &LowRankKernel, k: usize) -> Result<Vec<usize>> {
    let map = greedy_map(kernel, k)?;
    if map.truncated {
        return Err(NdppError::InitFailed(k));
    }
    let mut s = map.items;
    s.sort_unstable();
    Ok(s)
}

/// Runs the chain for `cfg.t_iter` iterations and returns the final
/// state. `k = n` has a single state and returns immediately.
pub fn mcmc_kndpp<R: Rng + ?Sized>(
    kernel: &LowRankKernel,
    prep: &Prepared,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<SampleReport> {
    let start = Instant::now();
    if cfg.k == kernel.n() && cfg.k >= 2 {
        return Ok(SampleReport {
            subset: (0..cfg.k).collect(),
            rejections: 0,
            per_iteration_rejections: Vec::new(),
            elapsed: start.elapsed(),
        });
    }
    if cfg.t_iter < 1 {
        return Err(NdppError::InvalidArgument(
            "t_iter must be at least 1".into(),
        ));
    }
    let mut chain = KndppChain::start(kernel, prep, cfg.k, &cfg.init, cfg.max_rejects, rng)?;
    for _ in 0..cfg.t_iter {
        chain.step(rng)?;
    }
    Ok(chain.into_report(start.elapsed()))
}

/// Options for [`mcmc_ndpp`]. The chain length is `k'²` for the drawn size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NdppConfig {
    pub max_rejects: u64,
    /// `Explicit` is not meaningful here since the size is random.
    pub init: InitPolicy,
}

impl Default for NdppConfig {
    fn default() -> Self {
        Self {
            max_rejects: DEFAULT_MAX_REJECTS,
            init: InitPolicy::UniformRetry,
        }
    }
}

/// Draws `|S| = k'` with probability `∝ e_{k'}`, then a k'-NDPP
/// sample.
pub fn mcmc_ndpp<R: Rng + ?Sized>(
    kernel: &LowRankKernel,
    prep: &Prepared,
    spectrum: &NdppSpectrum,
    cfg: &NdppConfig,
    rng: &mut R,
) -> Result<SampleReport> {
    let start = Instant::now();
    if matches!(cfg.init, InitPolicy::Explicit(_)) {
        return Err(NdppError::InvalidArgument(
            "explicit initialization needs a fixed size".into(),
        ));
    }
    let size = spectral::sample_size(&spectrum.esp, rng)?;
    let done = |subset: Vec<usize>| SampleReport {
        subset,
        rejections: 0,
        per_iteration_rejections: Vec::new(),
        elapsed: start.elapsed(),
    };
    match size {
        0 => Ok(done(Vec::new())),
        1 => {
            let q = linalg::symmetric_part(kernel.w());
            let a = prep.tree.traverse_sample(&q, rng)?;
            Ok(done(vec![a]))
        }
        k => {
            let cfg = ChainConfig {
                k,
                t_iter: default_t_iter(k),
                max_rejects: cfg.max_rejects,
                init: cfg.init.clone(),
            };
            let mut report = mcmc_kndpp(kernel, prep, &cfg, rng)?;
            report.elapsed = start.elapsed();
            Ok(report)
        }
    }
}

/// Output of [`greedy_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyMap {
    /// Items in selection order.
    pub items: Vec<usize>,
    /// `det(L_{S∪{s_j}}) / det(L_S)` at each step.
    pub gains: Vec<f64>,
    /// Set when every remaining gain fell to the floor before `k_max` items.
    pub truncated: bool,
}

/// Greedy MAP: repeatedly appends the item with the largest
/// `det(L_{S∪{i}})`. Each step conditions the inner matrix on the new item,
/// `W ← W − W x_sᵀ x_s W / (x_s W x_sᵀ)`, and refreshes every item's gain in
/// O(nd), O(n d k_max) overall.
pub fn greedy_map(kernel: &LowRankKernel, k_max: usize) -> Result<GreedyMap> {
    let (n, d) = (kernel.n(), kernel.rank());
    if k_max > d {
        return Err(NdppError::InvalidArgument(format!(
            "k_max = {k_max} exceeds d = {d}"
        )));
    }
    let x = kernel.x();
    let mut w = kernel.w().clone();
    let mut gains: Vec<f64> = (0..n).map(|i| kernel.diagonal(i)).collect();
    let floor = EPS_DET * gains.iter().fold(1.0_f64, |m, g| m.max(g.abs()));
    let mut chosen = vec![false; n];
    let mut out = GreedyMap {
        items: Vec::with_capacity(k_max),
        gains: Vec::with_capacity(k_max),
        truncated: false,
    };

    // per-item projections x_i p and q·x_i, refreshed after each selection
    let mut xp = vec![0.0; n];
    let mut xq = vec![0.0; n];
    while out.items.len() < k_max {
        let best = (0..n)
            .filter(|&i| !chosen[i])
            .max_by(|&a, &b| gains[a].total_cmp(&gains[b]).then(b.cmp(&a)));
        let s = match best {
            Some(s) if gains[s] > floor => s,
            _ => {
                out.truncated = true;
                break;
            }
        };
        chosen[s] = true;
        out.items.push(s);
        out.gains.push(gains[s]);

        let xs = DVector::from_iterator(d, x.row(s).iter().copied());
        let p = &w * &xs; // W x_sᵀ
        let q = w.tr_mul(&xs); // (x_s W)ᵀ
        let c = xs.dot(&p);
        if !(c > 0.0) {
            out.truncated = true;
            break;
        }
        let xpv = x * &p;
        let xqv = x * &q;
        xp.copy_from_slice(xpv.as_slice());
        xq.copy_from_slice(xqv.as_slice());
        for i in 0..n {
            if !chosen[i] {
                gains[i] -= xp[i] * xq[i] / c;
            }
        }
        w.ger(-1.0 / c, &p, &q, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::synth_kernel;
    use crate::oracle::{exact_kndpp_table, tv_distance, SubsetCounts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn t_iter_default_is_k_squared() {
        assert_eq!(default_t_iter(2), 4);
        assert_eq!(default_t_iter(5), 25);
        assert_eq!(default_t_iter(10), 100);
    }

    #[test]
    fn elementary_query_has_trace_k() {
        let k = synth_kernel(12, 6, 2).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let what = spectral::symmetrize_proposal(k.w()).unwrap();
        let prop = KdppProposal::new(&prep.gram, &what).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for size in 1..=4 {
            let e = spectral::sample_elementary_subset(&prop.table, size, &mut rng).unwrap();
            let q = prop.query(&e);
            let mass: f64 = (0..k.n()).map(|a| prep.tree.item_mass(&q, a)).sum();
            assert!((mass - size as f64).abs() < 1e-8, "{mass}");
        }
    }

    #[test]
    fn proposal_normalizer_matches_pair_enumeration() {
        let k = synth_kernel(8, 4, 6).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let what = spectral::symmetrize_proposal(k.w()).unwrap();
        let prop = KdppProposal::new(&prep.gram, &what).unwrap();
        let mut total = 0.0;
        for a in 0..8 {
            for b in a + 1..8 {
                total += pair_det(&what, prep.tree.row(a), prep.tree.row(b));
            }
        }
        assert!((total - prop.normalizer(2)).abs() < 1e-10 * total);
    }

    #[test]
    fn gram_root_route_matches_square_root_route() {
        let k = synth_kernel(15, 6, 8).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let (root, inv_root) = prep
            .gram_root
            .clone()
            .expect("random X has full column rank");
        let wa = k.condition_inner(k.w(), &[4]).unwrap().wa;
        let what = spectral::symmetrize_proposal(&wa).unwrap();
        let a = KdppProposal::new(&prep.gram, &what).unwrap();
        let b = KdppProposal::from_gram_root(&root, &inv_root, &what).unwrap();
        for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
            assert!((x - y).abs() < 1e-10 * a.eigenvalues()[0], "{x} vs {y}");
        }
        // the full-rank elementary kernels agree item by item
        let all: Vec<usize> = (0..4).collect();
        let (qa, qb) = (a.query(&all), b.query(&all));
        for item in 0..15 {
            let (ma, mb) = (
                prep.tree.item_mass(&qa, item),
                prep.tree.item_mass(&qb, item),
            );
            assert!((ma - mb).abs() < 1e-9, "{ma} vs {mb}");
        }
    }

    #[test]
    fn singular_gram_uses_square_root_route() {
        let mut x = DMatrix::zeros(6, 4);
        for i in 0..6 {
            x[(i, 0)] = 1.0 + i as f64;
            x[(i, 1)] = (i as f64).sin();
        }
        let k = LowRankKernel::new(
            x.columns(0, 2).into_owned(),
            x.columns(2, 2).into_owned(),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        assert!(prep.gram_root.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = mcmc_kndpp(&k, &prep, &ChainConfig::new(2), &mut rng).unwrap();
        assert_eq!(r.subset.len(), 2);
    }

    #[test]
    fn rank_deficient_proposal_is_rejected() {
        let k = synth_kernel(8, 4, 1).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let mut what = DMatrix::zeros(4, 4);
        what[(0, 0)] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(tree_kdpp_sample(&prep.tree, &what, &prep.gram, 2, &mut rng).is_err());
        assert_eq!(
            tree_kdpp_sample(&prep.tree, &what, &prep.gram, 1, &mut rng)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn symmetric_kernel_never_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DMatrix::from_fn(20, 5, |_, _| rng.random_range(-1.0..1.0));
        let k = LowRankKernel::symmetric(v).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        for a in [vec![], vec![3], vec![1, 7, 11]] {
            let up = UpProposal::new(&k, &prep, &a).unwrap();
            assert_eq!(up.target_inner(), up.proposal_inner());
            for _ in 0..50 {
                let draw = up.draw(&k, &prep.tree, &mut rng, 1).unwrap();
                assert_eq!(draw.rejections, 0);
                assert!(!a.contains(&draw.pair.0) && !a.contains(&draw.pair.1));
            }
        }
    }

    #[test]
    fn acceptance_ratio_never_exceeds_one() {
        let k = synth_kernel(30, 6, 4).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let up = UpProposal::new(&k, &prep, &[0, 5]).unwrap();
        for a in 0..30 {
            for b in a + 1..30 {
                let r = up.acceptance_ratio(&prep.tree, a, b);
                assert!((0.0..=1.0 + 1e-9).contains(&r), "{r} at ({a}, {b})");
            }
        }
    }

    #[test]
    fn full_set_is_returned_unchanged() {
        let k = synth_kernel(4, 4, 2).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = mcmc_kndpp(&k, &prep, &ChainConfig::new(4), &mut rng).unwrap();
        assert_eq!(r.subset, vec![0, 1, 2, 3]);
        assert_eq!(r.rejections, 0);
    }

    #[test]
    fn chain_validates_its_configuration() {
        let k = synth_kernel(10, 4, 2).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            ChainConfig::new(1),
            ChainConfig::new(5),
            ChainConfig::new(3).with_t_iter(0),
            ChainConfig::new(3).with_max_rejects(0),
        ] {
            assert!(mcmc_kndpp(&k, &prep, &cfg, &mut rng).is_err(), "{cfg:?}");
        }
        let cfg = ChainConfig::new(3).with_init(InitPolicy::Explicit(vec![1, 1, 2]));
        assert!(mcmc_kndpp(&k, &prep, &cfg, &mut rng).is_err());
        let cfg = ChainConfig::new(3)
            .with_init(InitPolicy::Explicit(vec![9, 1, 2]))
            .with_t_iter(3);
        let r = mcmc_kndpp(&k, &prep, &cfg, &mut rng).unwrap();
        assert_eq!(r.subset.len(), 3);
        assert_eq!(r.per_iteration_rejections.len(), 3);
        assert_eq!(r.per_iteration_rejections.iter().sum::<u64>(), r.rejections);
    }

    #[test]
    fn chain_is_deterministic_given_seed() {
        let k = synth_kernel(40, 6, 7).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mcmc_kndpp(&k, &prep, &ChainConfig::new(4), &mut rng).unwrap()
        };
        let (a, b) = (run(11), run(11));
        assert_eq!(a.subset, b.subset);
        assert_eq!(a.per_iteration_rejections, b.per_iteration_rejections);
    }

    #[test]
    fn small_chain_matches_exact_table() {
        let k = synth_kernel(6, 4, 12).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let table = exact_kndpp_table(&k, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ChainConfig::new(3);
        let counts: SubsetCounts = (0..20_000)
            .map(|_| mcmc_kndpp(&k, &prep, &cfg, &mut rng).unwrap().subset)
            .collect();
        let tv = tv_distance(&counts.distribution(), &table.entries);
        assert!(tv < 0.02, "{tv}");
    }

    #[test]
    fn greedy_on_a_diagonal_kernel_follows_the_diagonal() {
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![3f64.sqrt(), 1.0, 2f64.sqrt()]));
        let k = LowRankKernel::symmetric(v).unwrap();
        let g = greedy_map(&k, 3).unwrap();
        assert_eq!(g.items, vec![0, 2, 1]);
        assert!(!g.truncated);
        for (gain, want) in g.gains.iter().zip([3.0, 2.0, 1.0]) {
            assert!((gain - want).abs() < 1e-12);
        }
        assert_eq!(greedy_map(&k, 1).unwrap().items, vec![0]);
        assert!(greedy_map(&k, 4).is_err());
    }

    #[test]
    fn greedy_gains_are_determinant_ratios() {
        let k = synth_kernel(25, 6, 3).unwrap();
        let g = greedy_map(&k, 6).unwrap();
        let mut prev = 1.0;
        for j in 0..g.items.len() {
            let det = k.det_subset(&g.items[..=j]).unwrap();
            assert!(
                (det / prev - g.gains[j]).abs() < 1e-8 * g.gains[j].abs().max(1.0),
                "step {j}"
            );
            prev = det;
        }
    }

    #[test]
    fn greedy_reports_exhausted_rank() {
        // two identical items: after the first is chosen the second has zero gain
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let k = LowRankKernel::symmetric(v).unwrap();
        let g = greedy_map(&k, 2).unwrap();
        assert_eq!(g.items.len(), 1);
        assert!(g.truncated);
    }

    #[test]
    fn unconstrained_sampler_on_zero_kernel_returns_empty() {
        let k = LowRankKernel::symmetric(DMatrix::zeros(5, 2)).unwrap();
        let prep = Prepared::new(&k, None).unwrap();
        let spec = NdppSpectrum::from_kernel(&k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let r = mcmc_ndpp(&k, &prep, &spec, &NdppConfig::default(), &mut rng).unwrap();
            assert!(r.subset.is_empty());
        }
    }
}
